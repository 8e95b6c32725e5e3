use cod_lab::sexpr::{
    classify_pattern, delinearize, label_split, linearize, parse_sexpr, sample_expr, to_relgraph,
    Pattern, QueryGraph, SExpr, SplitLabel, SymbolPool,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pool(relations: usize) -> SymbolPool {
    SymbolPool {
        relations: (0..relations).map(|i| format!("ns.type.r{i}")).collect(),
        reversed: None,
        num_entities: 50,
    }
}

fn pattern() -> impl Strategy<Value = Pattern> {
    prop::sample::select(vec![
        Pattern::T0,
        Pattern::T1,
        Pattern::T2,
        Pattern::T3,
        Pattern::T4,
        Pattern::Other,
    ])
}

fn expr() -> impl Strategy<Value = (Pattern, SExpr)> {
    (pattern(), any::<u64>(), 1usize..8).prop_map(|(p, seed, rels)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (p, sample_expr(p, &pool(rels), &mut rng))
    })
}

fn rank(l: SplitLabel) -> u8 {
    match l {
        SplitLabel::Iid => 0,
        SplitLabel::Compositional => 1,
        SplitLabel::Zeroshot => 2,
    }
}

fn sorted_edges(g: &QueryGraph) -> Vec<(usize, String, usize)> {
    let mut e = g.edges.clone();
    e.sort();
    e
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn print_parse_round_trip((_, e) in expr()) {
        let text = e.to_string();
        prop_assert_eq!(parse_sexpr(&text).unwrap(), e.clone());
        // extra whitespace does not change the parse
        let spaced = text.replace(' ', "  \n ").replace('(', "( ");
        prop_assert_eq!(parse_sexpr(&spaced).unwrap(), e);
    }

    #[test]
    fn sampled_pattern_is_recovered((p, e) in expr()) {
        prop_assert_eq!(classify_pattern(&e), p);
    }

    #[test]
    fn linearization_preserves_structure((_, e) in expr()) {
        let (g, symbols) = to_relgraph(&e, 4).unwrap();
        let q = QueryGraph::from_sexpr(&e);
        prop_assert_eq!(g.num_nodes(), q.num_nodes());
        let lin = linearize(&g, |r| symbols.relation_name(r).to_string(), 8).unwrap();
        prop_assert_eq!(lin.spans.len(), g.num_nodes());
        let back = delinearize(&lin.tokens).unwrap();
        prop_assert_eq!(back.num_nodes(), q.num_nodes());
        prop_assert_eq!(sorted_edges(&back), sorted_edges(&q));
    }

    #[test]
    fn more_training_data_never_makes_a_split_harder(
        (_, test) in expr(),
        train in prop::collection::vec(expr(), 0..6),
        extra in prop::collection::vec(expr(), 0..6),
    ) {
        let base: Vec<SExpr> = train.into_iter().map(|(_, e)| e).collect();
        let mut grown = base.clone();
        grown.extend(extra.into_iter().map(|(_, e)| e));
        let before = label_split(&test, &base);
        let after = label_split(&test, &grown);
        prop_assert!(rank(after) <= rank(before), "{before:?} -> {after:?}");
    }

    #[test]
    fn seen_query_is_iid((_, e) in expr(), train in prop::collection::vec(expr(), 0..4)) {
        let mut corpus: Vec<SExpr> = train.into_iter().map(|(_, x)| x).collect();
        corpus.push(e.clone());
        prop_assert_eq!(label_split(&e, &corpus), SplitLabel::Iid);
    }

    #[test]
    fn parser_never_panics(text in "[()A-Za-z._ 0-9]{0,40}") {
        let _ = parse_sexpr(&text);
    }
}
