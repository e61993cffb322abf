//! End-to-end behaviour through the public API on a small trained fixture.

use std::sync::OnceLock;

use npc_core::abstraction::{build_decision_graph, DecisionGraph};
use npc_core::cdp::PathExtractor;
use npc_core::coverage::{input_cells, CoverageConfig, CoverageState, Criterion, InputCells};
use npc_core::fixture::{build_fixture, mlp, Fixture, FixtureConfig};
use npc_core::lrp::{relevance, relevance_with, LrpRule};
use npc_core::metrics::error_sensitivity_suites;
use npc_core::Tensor;
use proptest::prelude::*;

struct Setup {
    fixture: Fixture,
    graph: DecisionGraph,
    snpc: Vec<InputCells>,
    anpc: Vec<InputCells>,
}

fn setup() -> &'static Setup {
    static SETUP: OnceLock<Setup> = OnceLock::new();
    SETUP.get_or_init(|| {
        let mut cfg = FixtureConfig::blobs(2, 3, 7);
        cfg.train.epochs = 30;
        let fixture = build_fixture(&cfg).unwrap();
        let graph = build_decision_graph(&fixture.model, &fixture.train, 0.8, 3, 0.5, 7).unwrap();
        let config = CoverageConfig::default();
        let pool = &fixture.test.inputs()[..120];
        let cells = |c| {
            pool.iter()
                .map(|x| input_cells(c, &config, &fixture.model, &graph, x).unwrap())
                .collect()
        };
        let snpc = cells(Criterion::Snpc);
        let anpc = cells(Criterion::Anpc);
        Setup {
            fixture,
            graph,
            snpc,
            anpc,
        }
    })
}

fn state(criterion: Criterion, ids: &[usize]) -> CoverageState {
    let s = setup();
    let cells = match criterion {
        Criterion::Snpc => &s.snpc,
        Criterion::Anpc => &s.anpc,
    };
    let mut st = CoverageState::new(criterion, CoverageConfig::default(), &s.graph);
    for &i in ids {
        st.absorb(&cells[i]);
    }
    st
}

fn criterion() -> impl Strategy<Value = Criterion> {
    prop_oneof![Just(Criterion::Snpc), Just(Criterion::Anpc)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coverage_is_a_monotone_order_free_union(
        c in criterion(),
        a in prop::collection::vec(0usize..120, 0..30),
        b in prop::collection::vec(0usize..120, 0..30),
    ) {
        let sa = state(c, &a);
        let sb = state(c, &b);
        let ab: Vec<usize> = a.iter().chain(&b).copied().collect();
        let ba: Vec<usize> = b.iter().chain(&a).copied().collect();
        let sab = state(c, &ab);
        prop_assert!((0.0..=1.0).contains(&sab.coverage()));
        prop_assert!(sa.covered_bits().is_subset(sab.covered_bits()));
        let sba = state(c, &ba);
        prop_assert_eq!(sab.covered_bits(), sba.covered_bits());
        let mut merged = sa.clone();
        merged.merge(&sb).unwrap();
        prop_assert_eq!(merged.covered_bits(), sab.covered_bits());
        prop_assert_eq!(merged.inputs_seen(), ab.len());
    }

    #[test]
    fn conservation_holds_on_random_networks(seed in 0u64..500, x in prop::collection::vec(0.0f32..1.0, 4)) {
        let model = mlp(&[4, 8, 6, 3], seed);
        let r = relevance(&model, &Tensor::vector(x), None).unwrap();
        for l in 0..r.layers.len() {
            let total = r.layer_sum(l) + r.bias_leak[l];
            prop_assert!((total - r.origin_logit).abs() <= 1e-4 * r.origin_logit.abs().max(1.0));
        }
    }

    #[test]
    fn error_suites_nest_within_a_repeat(seed in any::<u64>(), n in 5usize..40) {
        let base: Vec<usize> = (0..n).collect();
        let errors: Vec<usize> = (1000..1000 + n).collect();
        let fractions = [0.0, 0.1, 0.3, 0.5];
        let suites = error_sensitivity_suites(&base, &errors, &fractions, 2, seed).unwrap();
        for repeat in suites.chunks(fractions.len()) {
            for pair in repeat.windows(2) {
                prop_assert!(pair[0].positions.iter().all(|p| pair[1].positions.contains(p)));
                for &p in &pair[0].positions {
                    prop_assert_eq!(pair[0].items[p], pair[1].items[p]);
                }
            }
        }
    }
}

#[test]
fn update_matches_precomputed_cells() {
    let s = setup();
    let mut st = CoverageState::new(Criterion::Anpc, CoverageConfig::default(), &s.graph);
    for x in &s.fixture.test.inputs()[..40] {
        st.update(&s.fixture.model, &s.graph, x).unwrap();
    }
    let ids: Vec<usize> = (0..40).collect();
    assert_eq!(
        st.covered_bits(),
        state(Criterion::Anpc, &ids).covered_bits()
    );
    assert!(st.cells_covered() > 0);
}

#[test]
fn graph_building_is_deterministic() {
    let s = setup();
    let again = build_decision_graph(&s.fixture.model, &s.fixture.train, 0.8, 3, 0.5, 7).unwrap();
    assert_eq!(again, s.graph);
    let members: usize = s
        .graph
        .classes
        .iter()
        .flatten()
        .map(|c| c.members.len())
        .sum();
    assert_eq!(members, s.fixture.train.len());
}

#[test]
fn zplus_relevance_is_non_negative_on_relu_layers() {
    let model = mlp(&[3, 6, 5, 2], 11);
    let r = relevance_with(
        &model,
        &Tensor::vector(vec![0.2, 0.9, 0.4]),
        None,
        LrpRule::ZPlus,
    )
    .unwrap();
    assert!(r.origin_logit > 0.0);
    assert!(r.layers.iter().flatten().all(|&v| v >= 0.0));
}

#[test]
fn extractor_rejects_bad_alpha() {
    assert!(PathExtractor::new(0.0).is_err());
    assert!(PathExtractor::new(1.5).is_err());
    assert!(PathExtractor::new(f64::NAN).is_err());
}
