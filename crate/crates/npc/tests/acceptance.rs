//! Acceptance checks on seeded fixtures. Each criterion prints one
//! PASS/FAIL line; the process fails if any criterion fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use npc::format::{self, FormatError, TensorSet};
use npc::parallel;
use npc_core::abstraction::{decode, DecisionGraph, GraphParams};
use npc_core::cdp::{width, PathExtractor};
use npc_core::coverage::{input_cells, Cell, CoverageConfig, CoverageState, Criterion, InputCells};
use npc_core::fixture::{build_fixture, small_cnn, Fixture, FixtureConfig};
use npc_core::lrp::relevance;
use npc_core::metrics::{
    error_sensitivity_suites, graph_samples, normalized_coverage_change, output_impartiality,
    similarity_stats, PathSample,
};
use npc_core::rng::Stream;
use npc_core::trainkit::{grad_input, Objective, PgdConfig};
use npc_core::{Model, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Fixtures {
    by_seed: Vec<Fixture>,
}

impl Fixtures {
    fn build() -> Self {
        let by_seed = SEEDS
            .iter()
            .map(|&s| build_fixture(&FixtureConfig::blobs(2, 3, s)).expect("fixture trains"))
            .collect();
        Fixtures { by_seed }
    }

    fn seed(&self, s: usize) -> &Fixture {
        &self.by_seed[s]
    }
}

fn graph(fx: &Fixture, alpha: f64, k: usize, beta: f64, seed: u64) -> DecisionGraph {
    let params = GraphParams::new(alpha, k, beta).expect("valid params");
    parallel::build_graph(&fx.model, fx.train.inputs(), params, seed).expect("graph builds")
}

fn lrp_conservation(fx: &Fixtures) -> Outcome {
    let f = fx.seed(0);
    let samples = &f.test.inputs()[..500];
    let start = Instant::now();
    let mut conserved = 0;
    let mut worst = 0.0f64;
    for x in samples {
        let r = relevance(&f.model, x, None).expect("relevance");
        let ok = (0..r.layers.len()).all(|l| {
            let err = (r.layer_sum(l) + r.bias_leak[l] - r.origin_logit).abs()
                / r.origin_logit.abs().max(1e-12);
            worst = worst.max(err);
            err <= 0.02
        });
        conserved += usize::from(ok);
    }
    let elapsed = start.elapsed();
    let share = conserved as f64 / samples.len() as f64;
    outcome(
        share >= 0.99 && elapsed < Duration::from_secs(10),
        format!(
            "{conserved}/500 conserved within 2%, worst relative error {worst:.2e}, {elapsed:.2?}"
        ),
    )
}

fn cdp_criticality(fx: &Fixtures) -> Outcome {
    let start = Instant::now();
    let mut gaps = Vec::new();
    for f in &fx.by_seed {
        let s = parallel::criticality(&f.model, f.test.inputs(), 0.9).expect("criticality");
        assert!(s.samples >= 200);
        gaps.push((s.inc_cdp - s.inc_ncdp, s.samples));
    }
    let elapsed = start.elapsed();
    let pass = gaps.iter().all(|&(g, _)| g >= 0.4) && elapsed < Duration::from_secs(60);
    let shown: Vec<String> = gaps
        .iter()
        .map(|(g, _)| format!("{:.1}pp", g * 100.0))
        .collect();
    outcome(
        pass,
        format!(
            "Inc.C - Inc.NC per seed [{}] over {} samples, {elapsed:.2?}",
            shown.join(", "),
            gaps[0].1
        ),
    )
}

fn width_monotonicity(fx: &Fixtures) -> Outcome {
    let f = fx.seed(0);
    let alphas = [0.7, 0.8, 0.9, 1.0];
    let extractors: Vec<PathExtractor> = alphas
        .iter()
        .map(|&a| PathExtractor::new(a).expect("alpha"))
        .collect();
    let mut widths = [0.0f64; 4];
    let mut nested = true;
    let inputs = f.test.inputs();
    for x in inputs {
        let paths: Vec<_> = extractors
            .iter()
            .map(|e| e.extract(&f.model, x).expect("path"))
            .collect();
        for (w, p) in widths.iter_mut().zip(&paths) {
            *w += width(p, &f.model);
        }
        for pair in paths.windows(2) {
            for (small, large) in pair[0].layers.iter().zip(&pair[1].layers) {
                let large: BTreeSet<usize> = large.iter().copied().collect();
                nested &= small.iter().all(|u| large.contains(u));
            }
        }
    }
    let widths = widths.map(|w| w / inputs.len() as f64);
    let monotone = widths.windows(2).all(|w| w[1] >= w[0]);
    outcome(
        nested && monotone,
        format!(
            "nested={nested}, mean widths {:.3}/{:.3}/{:.3}/{:.3} over {} samples",
            widths[0],
            widths[1],
            widths[2],
            widths[3],
            inputs.len()
        ),
    )
}

fn quintile_masking(fx: &Fixtures) -> Outcome {
    let mut held = 0;
    let mut shown = Vec::new();
    for f in &fx.by_seed {
        let rates = parallel::band_rates(&f.model, f.test.inputs(), 0.9).expect("bands");
        held += usize::from(rates[0] >= rates[4]);
        shown.push(format!("{:.3}>={:.3}", rates[0], rates[4]));
    }
    outcome(
        held == 5,
        format!(
            "band 1 vs band 5 per seed [{}], held in {held}/5",
            shown.join(", ")
        ),
    )
}

fn similarity_separation(fx: &Fixtures) -> Outcome {
    let f = fx.seed(0);
    let records = parallel::sample_records(&f.model, f.test.inputs(), 0.7).expect("records");
    let samples: Vec<PathSample> = records
        .into_iter()
        .map(|r| PathSample {
            class: r.predicted,
            cluster: None,
            layers: r.path.layers,
        })
        .collect();
    let s = similarity_stats(&samples, 100, 0);
    let (intra, inter) = (s.intra_class.unwrap_or(0.0), s.inter_class.unwrap_or(1.0));
    let g = graph(f, 0.7, 4, 0.6, 0);
    let members: Vec<PathSample> = graph_samples(&g).into_iter().map(|(_, p)| p).collect();
    let c = similarity_stats(&members, 100, 0);
    let (intra_cluster, intra_class) =
        (c.intra_cluster.unwrap_or(0.0), c.intra_class.unwrap_or(1.0));
    outcome(
        intra - inter >= 0.05 && intra_cluster >= intra_class,
        format!(
            "intra-class {intra:.3} vs inter-class {inter:.3}; k=4 intra-cluster {intra_cluster:.3} vs intra-class {intra_class:.3}"
        ),
    )
}

/// Bucket of `inter/union` found by scanning every bucket edge.
fn oracle_similarity_bucket(inter: usize, union: usize, m: usize) -> usize {
    if union == 0 {
        return m;
    }
    (1..=m).find(|&i| inter * m <= i * union).expect("J <= 1")
}

fn oracle_distance_bucket(d: f64, upper: f64, m: usize) -> (usize, bool) {
    if d > upper {
        return (m, true);
    }
    (
        (1..=m)
            .find(|&i| d <= upper * i as f64 / m as f64)
            .unwrap_or(m),
        false,
    )
}

fn oracle_cells(
    criterion: Criterion,
    config: &CoverageConfig,
    model: &Model,
    g: &DecisionGraph,
    x: &Tensor,
) -> InputCells {
    let a = PathExtractor::new(g.params.alpha)
        .unwrap()
        .analyze(model, x)
        .unwrap();
    let class = a.trace.predicted;
    let mut cells = Vec::new();
    let mut clamped = 0;
    for c in g.classes[class].iter().filter(|c| !c.is_empty()) {
        match criterion {
            Criterion::Snpc => {
                for (layer, al) in c.abstract_path.layers.iter().enumerate() {
                    let mine: BTreeSet<usize> = a.path.layers[layer].iter().copied().collect();
                    let theirs: BTreeSet<usize> = al.iter().map(|&(u, _)| u).collect();
                    let inter = mine.intersection(&theirs).count();
                    let union = mine.union(&theirs).count();
                    cells.push(Cell {
                        class,
                        cluster: c.cluster,
                        layer,
                        bucket: oracle_similarity_bucket(inter, union, config.buckets),
                    });
                }
            }
            Criterion::Anpc => {
                let score = |layers: &[Vec<usize>]| -> f64 {
                    let per: Vec<f64> = layers
                        .iter()
                        .zip(&a.path.layers)
                        .map(|(p, q)| {
                            let p: BTreeSet<usize> = p.iter().copied().collect();
                            let q: BTreeSet<usize> = q.iter().copied().collect();
                            let union = p.union(&q).count();
                            if union == 0 {
                                1.0
                            } else {
                                p.intersection(&q).count() as f64 / union as f64
                            }
                        })
                        .collect();
                    per.iter().sum::<f64>() / per.len() as f64
                };
                let mut nearest = 0;
                let mut best = f64::NEG_INFINITY;
                for (i, p) in c.member_paths.iter().enumerate() {
                    let s = score(&decode(p));
                    if s > best {
                        best = s;
                        nearest = i;
                    }
                }
                let mut at = 0;
                for (layer, al) in c.abstract_path.layers.iter().enumerate() {
                    let mut sq = 0.0f64;
                    for (j, &(u, _)) in al.iter().enumerate() {
                        let diff =
                            a.trace.layers[layer][u] as f64 - c.member_acts[nearest][at + j] as f64;
                        sq += diff * diff;
                    }
                    at += al.len();
                    let (bucket, over) =
                        oracle_distance_bucket(sq.sqrt(), config.upper, config.buckets);
                    clamped += usize::from(over);
                    cells.push(Cell {
                        class,
                        cluster: c.cluster,
                        layer,
                        bucket,
                    });
                }
            }
        }
    }
    InputCells {
        class,
        cells,
        clamped,
    }
}

fn coverage_algebra(fx: &Fixtures) -> Outcome {
    let f = fx.seed(0);
    let g = graph(f, 0.7, 4, 0.6, 0);
    let config = CoverageConfig::default();
    let pool = &f.test.inputs()[..300];
    let mut failures = Vec::new();
    let mut oracle_checked = 0;
    for criterion in [Criterion::Snpc, Criterion::Anpc] {
        let cells = parallel::suite_cells(criterion, &config, &f.model, &g, pool).expect("cells");
        for (i, x) in pool[..50].iter().enumerate() {
            let expected = oracle_cells(criterion, &config, &f.model, &g, x);
            let got = input_cells(criterion, &config, &f.model, &g, x).unwrap();
            if got != expected || cells[i] != expected {
                failures.push(format!(
                    "{} oracle mismatch on sample {i}",
                    criterion.name()
                ));
            }
            oracle_checked += 1;
        }
        let mut rng = Stream::Test.rng(criterion as u64);
        for suite_no in 0..200 {
            let draw = |rng: &mut npc_core::rng::Rng| -> Vec<usize> {
                let n = rng.random_range(1..=40);
                (0..n).map(|_| rng.random_range(0..pool.len())).collect()
            };
            let (a, b) = (draw(&mut rng), draw(&mut rng));
            let state_of = |ids: &[usize]| {
                let mut s = CoverageState::new(criterion, config, &g);
                ids.iter().for_each(|&i| {
                    s.absorb(&cells[i]);
                });
                s
            };
            let sa = state_of(&a);
            let sb = state_of(&b);
            let union: Vec<usize> = a.iter().chain(&b).copied().collect();
            let su = state_of(&union);
            let mut shuffled = union.clone();
            shuffled.shuffle(&mut rng);
            let ss = state_of(&shuffled);
            let mut merged = sa.clone();
            merged.merge(&sb).unwrap();
            let mut incremental = CoverageState::new(criterion, config, &g);
            for &i in &a {
                incremental.update(&f.model, &g, &pool[i]).unwrap();
            }
            let batch_inputs: Vec<Tensor> = a.iter().map(|&i| pool[i].clone()).collect();
            let batch =
                parallel::suite_coverage(criterion, config, &f.model, &g, &batch_inputs).unwrap();
            let ok = [&sa, &sb, &su]
                .iter()
                .all(|s| (0.0..=1.0).contains(&s.coverage()))
                && sa.covered_bits().is_subset(su.covered_bits())
                && sb.covered_bits().is_subset(su.covered_bits())
                && su.coverage() >= sa.coverage().max(sb.coverage())
                && ss.covered_bits() == su.covered_bits()
                && merged.covered_bits() == su.covered_bits()
                && incremental.covered_bits() == batch.covered_bits()
                && incremental.covered_bits() == sa.covered_bits();
            if !ok {
                failures.push(format!(
                    "{} suite {suite_no} broke an algebra law",
                    criterion.name()
                ));
            }
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "400 random suites (200 per criterion) and {oracle_checked} oracle samples agree"
            )
        } else {
            failures.join("; ")
        },
    )
}

fn error_sensitivity(fx: &Fixtures) -> Outcome {
    let fractions = [0.0, 0.01, 0.03, 0.05, 0.10];
    let config = CoverageConfig::default();
    let mut held = 0;
    let mut shown = Vec::new();
    for (s, f) in fx.by_seed.iter().enumerate() {
        let g = graph(f, 0.7, 4, 0.6, s as u64);
        let inputs = f.test.inputs();
        let labels = f.test.labels();
        let preds = parallel::predictions(&f.model, inputs).unwrap();
        let base: Vec<Tensor> = (0..inputs.len())
            .filter(|&i| preds[i] == labels[i])
            .take(300)
            .map(|i| inputs[i].clone())
            .collect();
        let attacks = parallel::attacks(
            &f.model,
            &inputs[..300],
            &labels[..300],
            &PgdConfig::with_eps(0.3, s as u64),
        )
        .unwrap();
        let errors: Vec<Tensor> = attacks
            .into_iter()
            .filter(|o| o.fooled)
            .map(|o| o.adversarial)
            .collect();
        let suites = error_sensitivity_suites(&base, &errors, &fractions, 1, s as u64).unwrap();
        let covs: Vec<f64> = suites
            .iter()
            .map(|suite| {
                parallel::suite_coverage(Criterion::Snpc, config, &f.model, &g, &suite.items)
                    .unwrap()
                    .coverage()
            })
            .collect();
        let monotone = covs.windows(2).all(|w| w[1] >= w[0]);
        held += usize::from(monotone);
        let norm = normalized_coverage_change(&covs, covs[0])
            .map(|n| {
                n.iter()
                    .map(|v| format!("{v:.2}"))
                    .collect::<Vec<_>>()
                    .join("/")
            })
            .unwrap_or_else(|e| e.to_string());
        shown.push(format!(
            "seed {s}: {} (normalized {norm})",
            if monotone { "up" } else { "dip" }
        ));
    }
    outcome(
        held >= 4,
        format!(
            "non-decreasing SNPC in {held}/5 seeds; {}",
            shown.join("; ")
        ),
    )
}

fn impartiality() -> Outcome {
    let uniform = output_impartiality(&[0, 1, 2, 2, 1, 0], 3).unwrap();
    let single = output_impartiality(&[1, 1, 1, 1], 3).unwrap();
    let skewed = output_impartiality(&[0, 0, 1], 2).unwrap();
    outcome(
        uniform == 1.0 && single == 0.0 && (skewed - 0.9183).abs() <= 1e-4,
        format!("uniform {uniform}, single-class {single}, [2/3,1/3] {skewed:.6}"),
    )
}

fn gradients(fx: &Fixtures) -> Outcome {
    let f = fx.seed(0);
    let cnn = small_cnn(0);
    let mut rng = Stream::Test.rng(9);
    let cnn_inputs: Vec<Tensor> = (0..10)
        .map(|_| {
            Tensor::new(
                vec![1, 8, 8],
                (0..64).map(|_| rng.random_range(0.0..1.0)).collect(),
            )
            .unwrap()
        })
        .collect();
    let mlp_inputs: Vec<Tensor> = f.test.inputs()[..10].to_vec();
    // Piecewise-linear nets have kinks (relu, pool winners); a coordinate
    // whose one-sided slopes disagree sits within h of one and is redrawn.
    let h = 5e-3f32;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
    let mut checked = 0;
    let mut redrawn = 0;
    let mut worst = 0.0f64;
    let mut bad = 0;
    for (model, inputs) in [(&f.model, &mlp_inputs), (&cnn, &cnn_inputs)] {
        for x in inputs.iter() {
            let class = model.predict(x).unwrap().0;
            let objective = Objective::TargetLogit { class };
            let g = grad_input(model, x, objective).unwrap();
            let at = |i: usize, delta: f32| {
                let mut y = x.clone();
                y.data_mut()[i] += delta;
                objective.value(&model.forward(&y, None).unwrap().logits)
            };
            let mut done = 0;
            while done < 20 {
                let i = rng.random_range(0..x.len());
                let (up, mid, down) = (at(i, h), at(i, 0.0), at(i, -h));
                let (right, left) = ((up - mid) / h as f64, (mid - down) / h as f64);
                if rel(right, left) > 1e-2 {
                    redrawn += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * h as f64);
                let err = rel(g.data()[i] as f64, numeric);
                worst = worst.max(err);
                bad += usize::from(err > 1e-2);
                checked += 1;
                done += 1;
            }
        }
    }
    let eps = 0.1f32;
    let outcomes = parallel::attacks(
        &f.model,
        &f.test.inputs()[..100],
        &f.test.labels()[..100],
        &PgdConfig::with_eps(eps, 3),
    )
    .unwrap();
    let mut linf = 0.0f32;
    let mut in_box = true;
    for (o, x) in outcomes.iter().zip(f.test.inputs()) {
        linf = linf.max(o.adversarial.max_abs_diff(x).unwrap());
        in_box &= o.adversarial.data().iter().all(|v| (0.0..=1.0).contains(v));
    }
    outcome(
        bad == 0 && linf <= eps && in_box,
        format!(
            "{checked} coordinates (dense and conv, {redrawn} redrawn at kinks), worst relative error {worst:.2e}; PGD max L-inf {linf} <= {eps}"
        ),
    )
}

fn persistence(fx: &Fixtures) -> Outcome {
    let f = fx.seed(0);
    let dir = tempfile::tempdir().unwrap();
    let model_bytes = format::save_model(&f.model);
    let model_path = dir.path().join("m.npcm");
    format::write_file(&model_path, &model_bytes).unwrap();
    let model = format::load_model(&format::read_file(&model_path).unwrap()).unwrap();
    let model_ok = format::save_model(&model) == model_bytes && model == f.model;

    let set = TensorSet::labeled(&f.test, model.input_shape());
    let data_bytes = format::save_dataset(&set).unwrap();
    let data_ok =
        format::save_dataset(&format::load_dataset(&data_bytes).unwrap()).unwrap() == data_bytes;

    let g = graph(f, 0.8, 4, 0.6, 0);
    let graph_bytes = format::save_graph(&g);
    let loaded = format::load_graph(&graph_bytes, &model).unwrap();
    let graph_ok = format::save_graph(&loaded) == graph_bytes && loaded == g;

    let rejected = matches!(
        format::load_graph(&graph_bytes, &fx.seed(1).model),
        Err(FormatError::HashMismatch { .. })
    );
    outcome(
        model_ok && data_ok && graph_ok && rejected,
        format!(
            "model {model_ok}, dataset {data_ok}, graph {graph_ok} byte-identical; foreign model rejected {rejected}"
        ),
    )
}

fn main() -> ExitCode {
    let fx = Fixtures::build();
    let criteria: [(&str, &dyn Fn() -> Outcome); 10] = [
        ("relevance conservation", &|| lrp_conservation(&fx)),
        ("critical path criticality", &|| cdp_criticality(&fx)),
        ("width monotonicity in alpha", &|| width_monotonicity(&fx)),
        ("relevance-band masking", &|| quintile_masking(&fx)),
        ("path similarity separation", &|| similarity_separation(&fx)),
        ("coverage algebra", &|| coverage_algebra(&fx)),
        ("error sensitivity", &|| error_sensitivity(&fx)),
        ("output impartiality", &impartiality),
        ("gradient correctness", &|| gradients(&fx)),
        ("persistence", &|| persistence(&fx)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "criterion {:>2} {name}: {} ({})",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {}/{} passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
