//! Finite-difference checks over every composite operation and the full
//! training objective, one random instance per seed.

use cod_lab::diffmath::{gradcheck, DiffError, Tape, Tensor, Var};
use cod_lab::encoders::{EncoderConfig, GraphEncoder, Pooling, RelGraph, TextEncoder};
use cod_lab::objective::{
    binary_cross_entropy, cod_loss, contrastive_term, cross_entropy, fuse, total_loss, CodConfig,
    FusionMode, NegativePool, ObjectiveError,
};
use cod_lab::params::{Bound, ParamStore};
use cod_lab::taskgen::{generate, Family, GeneratorSpec, TaskLayout};
use cod_lab::trainer::{Arm, Model, Prepared, TrainConfig, TrainError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero, for ops with a kink or singularity there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ x ⊙ w` with a fixed random weight, turning any tensor into a scalar
/// without symmetric cancellation.
fn probe_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var, DiffError> {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn check<E, F>(inputs: &[Tensor], f: F) -> Result<f64, E>
where
    E: From<DiffError>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
{
    Ok(gradcheck(inputs, None, H, f)?.max_rel_err)
}

fn small_encoder_cfg() -> EncoderConfig {
    EncoderConfig {
        d_model: 6,
        ff_dim: 8,
        node_dim: 4,
        max_len: 32,
        ..EncoderConfig::default()
    }
}

/// Worst relative error per named check for one seed.
pub fn run_seed(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let (r, c, k) = (
        rng.gen_range(1..5),
        rng.gen_range(1..5),
        rng.gen_range(1..5),
    );

    let a = rand_tensor(&mut rng, &[r, c]);
    let b = rand_tensor(&mut rng, &[c, k]);
    out.push((
        "matmul",
        check::<DiffError, _>(&[a.clone(), b], |t, v| {
            let m = t.matmul(v[0], v[1])?;
            probe_sum(t, m, seed)
        })
        .unwrap(),
    ));
    out.push((
        "transpose+reshape",
        check::<DiffError, _>(&[a.clone()], |t, v| {
            let m = t.transpose(v[0])?;
            let m = t.reshape(m, vec![r * c])?;
            probe_sum(t, m, seed)
        })
        .unwrap(),
    ));
    let row = rand_tensor(&mut rng, &[c]);
    out.push((
        "add_row+tanh",
        check::<DiffError, _>(&[a.clone(), row], |t, v| {
            let m = t.add_row(v[0], v[1])?;
            let m = t.tanh(m);
            probe_sum(t, m, seed)
        })
        .unwrap(),
    ));
    let kinky = away_from_zero(&mut rng, &[r, c]);
    out.push((
        "relu",
        check::<DiffError, _>(&[kinky], |t, v| {
            let m = t.relu(v[0]);
            probe_sum(t, m, seed)
        })
        .unwrap(),
    ));
    let b2 = rand_tensor(&mut rng, &[r, c]);
    out.push((
        "mul+sub+scale",
        check::<DiffError, _>(&[a.clone(), b2], |t, v| {
            let p = t.mul(v[0], v[1])?;
            let s = t.sub(p, v[1])?;
            let s = t.scale(s, -1.7);
            probe_sum(t, s, seed)
        })
        .unwrap(),
    ));
    out.push((
        "exp+log",
        check::<DiffError, _>(&[a.clone()], |t, v| {
            let e = t.exp(v[0]);
            let one = t.constant(Tensor::new(vec![r, c], vec![1.0; r * c]).unwrap());
            let e = t.add(e, one)?;
            let l = t.log(e)?;
            probe_sum(t, l, seed)
        })
        .unwrap(),
    ));
    out.push((
        "softplus",
        check::<DiffError, _>(&[a.clone()], |t, v| {
            let s = t.softplus(v[0]);
            probe_sum(t, s, seed)
        })
        .unwrap(),
    ));
    let vec_in = rand_tensor(&mut rng, &[c + 1]);
    out.push((
        "softmax",
        check::<DiffError, _>(&[vec_in.clone()], |t, v| {
            let s = t.softmax(v[0])?;
            probe_sum(t, s, seed)
        })
        .unwrap(),
    ));
    out.push((
        "logsumexp",
        check::<DiffError, _>(&[vec_in.clone()], |t, v| {
            let s = t.scale(v[0], 3.0);
            t.logsumexp(s)
        })
        .unwrap(),
    ));
    let wide = rand_tensor(&mut rng, &[r, c + 1]);
    let mask: Vec<bool> = (0..r * (c + 1))
        .map(|i| i % (c + 1) == 0 || rng.gen_bool(0.7))
        .collect();
    out.push((
        "logsumexp_rows(mask)",
        check::<DiffError, _>(&[wide], |t, v| {
            let s = t.logsumexp_rows(v[0], Some(mask.clone()))?;
            probe_sum(t, s, seed)
        })
        .unwrap(),
    ));
    let u = away_from_zero(&mut rng, &[c + 1]);
    let w = away_from_zero(&mut rng, &[c + 1]);
    out.push((
        "cosine_sim",
        check::<DiffError, _>(&[u, w], |t, v| t.cosine_sim(v[0], v[1])).unwrap(),
    ));
    let rows = away_from_zero(&mut rng, &[r, c + 1]);
    out.push((
        "normalize_rows",
        check::<DiffError, _>(&[rows], |t, v| {
            let n = t.normalize_rows(v[0])?;
            probe_sum(t, n, seed)
        })
        .unwrap(),
    ));
    out.push((
        "mean_rows+mean",
        check::<DiffError, _>(&[a.clone()], |t, v| {
            let m = t.mean_rows(v[0])?;
            let m = t.mul(m, m)?;
            Ok(t.mean(m))
        })
        .unwrap(),
    ));
    let idx: Vec<usize> = (0..r + 2).map(|_| rng.gen_range(0..r)).collect();
    out.push((
        "gather_rows",
        check::<DiffError, _>(&[a.clone()], |t, v| {
            let g = t.gather_rows(v[0], &idx)?;
            probe_sum(t, g, seed)
        })
        .unwrap(),
    ));
    let picks: Vec<usize> = (0..3).map(|_| rng.gen_range(0..r * c)).collect();
    out.push((
        "pick+index",
        check::<DiffError, _>(&[a.clone()], |t, v| {
            let p = t.pick(v[0], &picks)?;
            let p = t.tanh(p);
            let first = t.index(p, 0)?;
            let s = t.sum(p);
            t.add(s, first)
        })
        .unwrap(),
    ));
    let other = rand_tensor(&mut rng, &[r, k]);
    out.push((
        "concat",
        check::<DiffError, _>(&[a.clone(), other], |t, v| {
            let m = t.concat(&[v[0], v[1]])?;
            let m = t.tanh(m);
            probe_sum(t, m, seed)
        })
        .unwrap(),
    ));
    let extra = rand_tensor(&mut rng, &[k, c]);
    let single = rand_tensor(&mut rng, &[c]);
    out.push((
        "stack_rows",
        check::<DiffError, _>(&[a.clone(), extra, single], |t, v| {
            let m = t.stack_rows(&[v[0], v[1], v[2]])?;
            let m = t.tanh(m);
            probe_sum(t, m, seed)
        })
        .unwrap(),
    ));

    let classes = rng.gen_range(2..5);
    let logits = rand_tensor(&mut rng, &[r, classes]);
    let labels: Vec<usize> = (0..r).map(|_| rng.gen_range(0..classes)).collect();
    out.push((
        "cross_entropy",
        check::<ObjectiveError, _>(&[logits], |t, v| cross_entropy(t, v[0], &labels)).unwrap(),
    ));
    let gold: Vec<Vec<bool>> = (0..r)
        .map(|_| {
            let n = rng.gen_range(2..5);
            let hit = rng.gen_range(0..n);
            (0..n).map(|i| i == hit).collect()
        })
        .collect();
    let total: usize = gold.iter().map(Vec::len).sum();
    let scores = rand_tensor(&mut rng, &[total, 1]);
    out.push((
        "binary_cross_entropy",
        check::<ObjectiveError, _>(&[scores], |t, v| binary_cross_entropy(t, v[0], &gold)).unwrap(),
    ));
    let ht = rand_tensor(&mut rng, &[r, c]);
    let hg = rand_tensor(&mut rng, &[r, c]);
    let wres = rand_tensor(&mut rng, &[c, c]);
    out.push((
        "fuse(residual)",
        check::<ObjectiveError, _>(&[ht, hg, wres], |t, v| {
            let f = fuse(t, v[0], v[1], FusionMode::Residual, Some(v[2]))?;
            Ok(probe_sum(t, f, seed)?)
        })
        .unwrap(),
    ));

    let n = rng.gen_range(2..5);
    let p = rng.gen_range(2..6);
    let zt = away_from_zero(&mut rng, &[n, p]);
    let zg = away_from_zero(&mut rng, &[n, p]);
    let cfg = CodConfig {
        tau: rng.gen_range(0.2..1.0),
        negative_pool: if rng.gen_bool(0.5) {
            NegativePool::BothModalities
        } else {
            NegativePool::OppositeOnly
        },
        batch_mean: rng.gen_bool(0.5),
        stop_grad_negatives: rng.gen_bool(0.7),
        ..CodConfig::default()
    };
    out.push((
        "cod_loss",
        check::<ObjectiveError, _>(&[zt.clone(), zg.clone()], |t, v| {
            cod_loss(t, v[0], v[1], &cfg)
        })
        .unwrap(),
    ));
    let tau = cfg.tau;
    out.push((
        "contrastive_term",
        check::<ObjectiveError, _>(&[zt, zg], |t, v| {
            let trow: Vec<Var> = (0..n)
                .map(|i| t.gather_rows(v[0], &[i]))
                .collect::<Result<_, _>>()?;
            let grow: Vec<Var> = (0..n)
                .map(|i| t.gather_rows(v[1], &[i]))
                .collect::<Result<_, _>>()?;
            let trow: Vec<Var> = trow
                .into_iter()
                .map(|x| t.reshape(x, vec![p]))
                .collect::<Result<_, _>>()?;
            let grow: Vec<Var> = grow
                .into_iter()
                .map(|x| t.reshape(x, vec![p]))
                .collect::<Result<_, _>>()?;
            let pool: Vec<Var> = trow[1..].iter().chain(&grow).copied().collect();
            contrastive_term(t, trow[0], grow[0], &pool, tau)
        })
        .unwrap(),
    ));

    out.push(("text_encoder", text_encoder_check(&mut rng, seed)));
    out.push(("graph_encoder", graph_encoder_check(&mut rng, seed)));
    out.push(("total_loss", full_objective_check(&mut rng, seed)));
    out
}

fn store_check<F>(store: &ParamStore, rng: &mut ChaCha8Rng, samples: usize, f: F) -> f64
where
    F: Fn(&mut Tape, &Bound) -> Result<Var, TrainError>,
{
    let inputs: Vec<Tensor> = store.values().to_vec();
    let coords: Vec<(usize, usize)> = (0..samples)
        .map(|_| {
            let k = rng.gen_range(0..inputs.len());
            (k, rng.gen_range(0..inputs[k].len()))
        })
        .collect();
    gradcheck::<TrainError, _>(&inputs, Some(&coords), H, |t, v| {
        let bound = Bound::from_vars(v.to_vec());
        f(t, &bound)
    })
    .unwrap()
    .max_rel_err
}

fn text_encoder_check(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let cfg = small_encoder_cfg();
    let pooling = [Pooling::Mean, Pooling::Cls, Pooling::PerEntity][rng.gen_range(0..3)];
    let mut store = ParamStore::new();
    let enc = TextEncoder::new(&mut store, &cfg, 12, rng).with_pooling(pooling);
    let len = rng.gen_range(3..9);
    let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..12)).collect();
    let spans = vec![(0, 1), (1, len)];
    store_check(&store, rng, 40, |t, b| {
        let (_, pooled) = enc.encode(t, b, &tokens, Some(&spans))?;
        Ok(probe_sum(t, pooled, seed)?)
    })
}

fn graph_encoder_check(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let cfg = EncoderConfig {
        gnn_layers: rng.gen_range(1..4),
        ..small_encoder_cfg()
    };
    let mut store = ParamStore::new();
    let enc = GraphEncoder::new(&mut store, &cfg, 3, rng);
    let n = rng.gen_range(2..6);
    let edges: Vec<(usize, usize, usize)> = (1..n)
        .map(|i| (rng.gen_range(0..i), rng.gen_range(1..3), i))
        .collect();
    let g = RelGraph::new(n, 3, edges, cfg.node_dim).unwrap();
    store_check(&store, rng, 40, |t, b| {
        let (_, pooled) = enc.encode(t, b, &g)?;
        Ok(probe_sum(t, pooled, seed)?)
    })
}

/// `L_task + λ·L_CoD` through both encoders, projection heads and task head.
fn full_objective_check(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let family = if rng.gen_bool(0.5) {
        Family::ComplementaryXor
    } else {
        Family::AlignedRank
    };
    let layout = TaskLayout::for_family(family);
    let cfg = TrainConfig {
        arm: Arm::HybridCod,
        seed,
        encoder: small_encoder_cfg(),
        task_hidden: 5,
        cod: CodConfig {
            shared_dim: 5,
            tau: 0.5,
            lambda: rng.gen_range(0.1..2.0),
            batch_mean: rng.gen_bool(0.5),
            ..CodConfig::default()
        },
        ..TrainConfig::default()
    };
    let data = generate(&GeneratorSpec::new(family, 3, seed)).unwrap();
    let prepared: Vec<Prepared> = data
        .iter()
        .map(|i| Prepared::new(i, &layout, &cfg.encoder).unwrap())
        .collect();
    let batch: Vec<&Prepared> = prepared.iter().collect();
    let model = Model::new(&layout, &cfg);
    store_check(&model.store, rng, 60, |t, b| {
        let reps = model.encode(t, b, &batch, true, true)?;
        let logits = model.logits(t, b, reps)?;
        let l_task = cod_lab::objective::task_loss(t, logits, &model.targets(&batch))?;
        let (zt, zg) = model.project(t, b, reps.text.unwrap(), reps.graph.unwrap())?;
        let l_cod = cod_loss(t, zt, zg, &cfg.cod)?;
        Ok(total_loss(t, l_task, Some(l_cod), cfg.cod.lambda)?)
    })
}
