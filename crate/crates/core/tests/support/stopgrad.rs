//! Gradients of one CoD direction, `Σ_i l_cl(anchor_i, sg(other_i))`, split by
//! which modality owns each parameter.

use cod_lab::diffmath::{Tape, Tensor, Var};
use cod_lab::encoders::{EncoderConfig, GraphEncoder, RelGraph, TextEncoder};
use cod_lab::objective::{contrastive_term, ProjectionHeads};
use cod_lab::params::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Encoders and projection heads for both modalities on one store.
pub struct Pair {
    pub store: ParamStore,
    pub text: TextEncoder,
    pub graph: GraphEncoder,
    pub heads: ProjectionHeads,
    pub text_ids: Vec<usize>,
    pub graph_ids: Vec<usize>,
}

pub fn pair(seed: u64) -> Pair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        d_model: 8,
        ff_dim: 8,
        node_dim: 4,
        ..EncoderConfig::default()
    };
    let mut store = ParamStore::new();
    let text = TextEncoder::new(&mut store, &cfg, 10, &mut rng);
    let after_text = store.len();
    let graph = GraphEncoder::new(&mut store, &cfg, 3, &mut rng);
    let after_graph = store.len();
    let heads = ProjectionHeads::new(&mut store, 8, 6, &mut rng);
    let names: Vec<String> = (0..store.len())
        .map(|i| store.name(i).to_string())
        .collect();
    let text_ids = (0..store.len())
        .filter(|&i| i < after_text || names[i].starts_with("proj.text"))
        .collect();
    let graph_ids = (0..store.len())
        .filter(|&i| (after_text..after_graph).contains(&i) || names[i].starts_with("proj.graph"))
        .collect();
    Pair {
        store,
        text,
        graph,
        heads,
        text_ids,
        graph_ids,
    }
}

fn rows(tape: &mut Tape, m: Var, n: usize, p: usize) -> Vec<Var> {
    (0..n)
        .map(|i| {
            let r = tape.gather_rows(m, &[i]).unwrap();
            tape.reshape(r, vec![p]).unwrap()
        })
        .collect()
}

/// One direction over the both-modalities pool, then backward.
/// Returns the model and per-parameter gradients.
pub fn one_direction(seed: u64, text_anchor: bool) -> (Pair, Vec<Tensor>) {
    let p = pair(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let n = rng.gen_range(2..6);
    let mut tape = Tape::new();
    let bound = p.store.bind(&mut tape);
    let mut ht = Vec::new();
    let mut hg = Vec::new();
    for _ in 0..n {
        let len = rng.gen_range(2..7);
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(2..10)).collect();
        ht.push(p.text.encode(&mut tape, &bound, &tokens, None).unwrap().1);
        let nodes = rng.gen_range(2..6);
        let edges = (1..nodes)
            .map(|i| (rng.gen_range(0..i), rng.gen_range(1..3), i))
            .collect();
        let g = RelGraph::new(nodes, 3, edges, 4).unwrap();
        hg.push(p.graph.encode(&mut tape, &bound, &g).unwrap().1);
    }
    let ht = tape.stack_rows(&ht).unwrap();
    let hg = tape.stack_rows(&hg).unwrap();
    let (zt, zg) = p.heads.project(&mut tape, &bound, ht, hg).unwrap();
    let (anchor, other) = if text_anchor { (zt, zg) } else { (zg, zt) };
    let other_sg = tape.stop_gradient(other);
    let a = rows(&mut tape, anchor, n, 6);
    let o = rows(&mut tape, other_sg, n, 6);
    let mut total = None;
    for i in 0..n {
        let pool: Vec<Var> = a
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .chain(o.iter().copied())
            .collect();
        let l = contrastive_term(&mut tape, a[i], o[i], &pool, 0.1).unwrap();
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l).unwrap(),
        });
    }
    tape.backward(total.unwrap()).unwrap();
    let grads = bound.grads(&tape);
    (p, grads)
}

/// Checks both directions for one seed: every teacher-side gradient is
/// exactly zero and some student-side gradient is not.
pub fn check_seed(seed: u64) -> Result<(), String> {
    for text_anchor in [true, false] {
        let (p, grads) = one_direction(seed, text_anchor);
        let (student, teacher) = if text_anchor {
            (&p.text_ids, &p.graph_ids)
        } else {
            (&p.graph_ids, &p.text_ids)
        };
        for &i in teacher {
            if grads[i].data().iter().any(|&x| x != 0.0) {
                return Err(format!(
                    "seed {seed}: teacher parameter {} got gradient",
                    p.store.name(i)
                ));
            }
        }
        if !student
            .iter()
            .any(|&i| grads[i].data().iter().any(|&x| x != 0.0))
        {
            return Err(format!("seed {seed}: student side received no gradient"));
        }
    }
    Ok(())
}
