//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured values (run with `--nocapture` to see them). Everything
//! runs against the scripted backend; no network, no credentials.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iuq_core::backend::{Client, ClientOptions, StageTag};
use iuq_core::evaluation::{self, auprc, auroc, pearson_with_ci};
use iuq_core::model::{method, CorrectnessLabel, KernelSpec, RunArtifacts, ScoreVector};
use iuq_core::pipeline::{self, PipelineConfig};
use iuq_core::report::interpolate_to;
use iuq_core::scoring::{self, ScoreConfig};
use iuq_core::store::{PipelineStage, RunStore};
use iuq_core::synthworld::{build_world, scripted_backend_from_world, WorldConfig};

fn fast_client(world_cfg: &WorldConfig) -> Client {
    let world = build_world(world_cfg).expect("world builds");
    let backend = scripted_backend_from_world(world).expect("backend builds");
    Client::with_options(
        Box::new(backend),
        ClientOptions {
            max_retries: 1,
            backoff_base_ms: 0,
            max_in_flight: 8,
        },
    )
}

/// Run the full pipeline over a synthetic world in a temp dir and return
/// the assembled scores plus ground-truth labels.
fn run_world(
    world_cfg: &WorldConfig,
    pipe_cfg: &PipelineConfig,
    kernel: KernelSpec,
) -> (RunArtifacts, Vec<ScoreVector>, Vec<CorrectnessLabel>) {
    let world = build_world(world_cfg).expect("world builds");
    let dataset = world.dataset();
    let client = fast_client(world_cfg);
    let dir = tempfile::tempdir().expect("tempdir");
    let snapshot = pipeline::config_snapshot(pipe_cfg, &client);
    let mut store = RunStore::open(dir.path(), &pipeline::run_id(&snapshot), snapshot, false)
        .expect("store opens");
    store.append(&dataset).expect("topics stored");
    let summary = pipeline::run_pipeline(&mut store, &client, pipe_cfg, None).expect("pipeline");
    assert_eq!(summary.topics_failed, 0, "no topic may fail");
    let artifacts = store.load_artifacts().expect("artifacts load");
    let labels = world.ground_truth_labels(&artifacts.claims);
    let score_cfg = ScoreConfig {
        kernel,
        include_own_response: pipe_cfg.include_own_response,
        ..ScoreConfig::default()
    };
    let (scores, _) = scoring::assemble_scores(&artifacts, &score_cfg);
    (artifacts, scores, labels)
}

fn auroc_of(scores: &[ScoreVector], labels: &[CorrectnessLabel], name: &str) -> Option<f64> {
    evaluation::evaluate_methods(scores, labels)
        .into_iter()
        .find(|r| r.method == name)
        .and_then(|r| r.auroc)
}

#[test]
fn criterion_1_worked_example_fidelity() {
    let start = Instant::now();
    let record = scoring::claim_faithfulness("c1", &[vec![Some(0.5), Some(1.0), Some(1.0)]])
        .expect("faithfulness computes");
    let expected = 1.0 - 2.5 / 3.0;
    assert!(
        (record.f - expected).abs() <= 1e-9,
        "F = {} != {expected}",
        record.f
    );
    assert!((record.f - 0.17).abs() < 0.005, "rounds to the reported 0.17");

    let verdicts: Vec<(&str, bool)> = vec![
        ("r0", true),
        ("r1", true),
        ("r2", true),
        ("r3", false),
        ("r4", false),
    ];
    let s = iuq_core::baselines::claim_entailment_s(&verdicts, "r0", true);
    assert_eq!(s, 0.6, "S must be 3/5 exactly");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "runtime {elapsed:?} exceeds 1 s");
    println!(
        "PASS criterion 1: worked-example fidelity (F = {:.10}, S = {s}) in {elapsed:?}",
        record.f
    );
}

/// Direct-summation kernel oracle, written independently of the library.
fn kernel_oracle(f: &[f64], kernel: &KernelSpec) -> Vec<f64> {
    let k = f.len();
    let mut out = vec![0.0; k];
    for i in 0..k {
        match kernel {
            KernelSpec::Exp { lambda } => {
                for j in 0..=i {
                    out[i] += (1.0 - f[j]) * (-lambda * (i - j) as f64).exp();
                }
            }
            KernelSpec::Linear { m, b } => {
                for j in 0..=i {
                    out[i] += (1.0 - f[j]) * (m * (i - j) as f64 + b);
                }
            }
            KernelSpec::Accumulative => {
                for j in 0..=i {
                    out[i] += 1.0 - f[j];
                }
            }
            KernelSpec::NoPropagation => out[i] = 1.0 - f[i],
        }
    }
    out
}

#[test]
fn criterion_2_kernel_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let kernels = [
        KernelSpec::Exp { lambda: 0.1 },
        KernelSpec::Exp { lambda: 1.0 },
        KernelSpec::Exp { lambda: 5.0 },
        KernelSpec::Linear { m: 0.1, b: 0.0 },
        KernelSpec::Accumulative,
        KernelSpec::NoPropagation,
    ];
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.gen_range(1..=50);
        let f: Vec<f64> = (0..len).map(|_| rng.gen::<f64>()).collect();
        for kernel in &kernels {
            let got = scoring::unfaithfulness_weighting(&f, kernel).expect("kernel computes");
            let want = kernel_oracle(&f, kernel);
            for (g, w) in got.iter().zip(&want) {
                let err = (g - w).abs();
                worst = worst.max(err);
                assert!(err <= 1e-12, "kernel {kernel:?}: |{g} - {w}| = {err}");
            }
        }
        // Exp(30) collapses to no-propagation.
        let sharp = scoring::unfaithfulness_weighting(&f, &KernelSpec::Exp { lambda: 30.0 })
            .expect("kernel computes");
        let none = scoring::unfaithfulness_weighting(&f, &KernelSpec::NoPropagation)
            .expect("kernel computes");
        for (a, b) in sharp.iter().zip(&none) {
            assert!((a - b).abs() <= 1e-9, "Exp(30) vs NoPropagation: |{a} - {b}|");
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "runtime {elapsed:?} exceeds 5 s");
    println!("PASS criterion 2: kernel oracle (worst error {worst:.3e}) in {elapsed:?}");
}

/// Quadratic pairwise AUROC oracle.
fn auroc_oracle(scored: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = scored.iter().filter(|(_, l)| *l).map(|(c, _)| *c).collect();
    let neg: Vec<f64> = scored.iter().filter(|(_, l)| !*l).map(|(c, _)| *c).collect();
    let mut total = 0.0;
    for p in &pos {
        for n in &neg {
            if p > n {
                total += 1.0;
            } else if p == n {
                total += 0.5;
            }
        }
    }
    total / (pos.len() * neg.len()) as f64
}

/// Step-through average-precision oracle with tie grouping.
fn auprc_oracle(scored: &[(f64, bool)]) -> f64 {
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let n_pos = sorted.iter().filter(|(_, l)| *l).count();
    let mut thresholds: Vec<f64> = sorted.iter().map(|(c, _)| *c).collect();
    thresholds.dedup();
    let mut ap = 0.0;
    for threshold in thresholds {
        let at_or_above: Vec<&(f64, bool)> =
            sorted.iter().filter(|(c, _)| *c >= threshold).collect();
        let tp = at_or_above.iter().filter(|(_, l)| *l).count();
        let group_pos = sorted.iter().filter(|(c, l)| *c == threshold && *l).count();
        if group_pos > 0 {
            ap += group_pos as f64 * (tp as f64 / at_or_above.len() as f64);
        }
    }
    ap / n_pos as f64
}

/// Textbook Pearson oracle: deviations from the means, then the Fisher
/// machinery applied directly.
fn pearson_oracle(pairs: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|(x, _)| *x).sum::<f64>() / n;
    let my = pairs.iter().map(|(_, y)| *y).sum::<f64>() / n;
    let num: f64 = pairs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let dx: f64 = pairs.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let dy: f64 = pairs.iter().map(|(_, y)| (y - my) * (y - my)).sum();
    let r = num / (dx.sqrt() * dy.sqrt());
    let z = r.atanh();
    let se = 1.0 / (n - 3.0).sqrt();
    ((z - 1.96 * se).tanh(), r, (z + 1.96 * se).tanh())
}

#[test]
fn criterion_3_metric_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..200 {
        let n = rng.gen_range(4..=200);
        // Coarse confidences force ties; guarantee both classes.
        let mut scored: Vec<(f64, bool)> = (0..n)
            .map(|_| ((rng.gen_range(0..25) as f64) / 24.0, rng.gen_bool(0.5)))
            .collect();
        scored[0].1 = true;
        scored[1].1 = false;

        let got = auroc(&scored).expect("auroc computes");
        let want = auroc_oracle(&scored);
        assert_eq!(got, want, "case {case}: auroc mismatch");

        let got = auprc(&scored).expect("auprc computes");
        let want = auprc_oracle(&scored);
        assert!((got - want).abs() <= 1e-12, "case {case}: auprc |{got} - {want}|");

        let pairs: Vec<(f64, f64)> = scored
            .iter()
            .map(|(c, l)| (*c + 0.001 * rng.gen::<f64>(), if *l { 1.0 } else { 0.0 }))
            .collect();
        let result = pearson_with_ci(&pairs).expect("pearson computes");
        let (lo, r, hi) = pearson_oracle(&pairs);
        assert!((result.r - r).abs() <= 1e-12, "case {case}: r |{} - {r}|", result.r);
        assert!((result.ci_low - lo).abs() <= 1e-12, "case {case}: ci_low");
        assert!((result.ci_high - hi).abs() <= 1e-12, "case {case}: ci_high");
        assert!((-1.0..=1.0).contains(&result.ci_low));
        assert!((-1.0..=1.0).contains(&result.ci_high));
        assert!(result.ci_low <= result.r && result.r <= result.ci_high);
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "runtime {elapsed:?} exceeds 10 s");
    println!("PASS criterion 3: metric oracles (200 random sets) in {elapsed:?}");
}

fn separation_world(seed: u64) -> WorldConfig {
    WorldConfig {
        seed,
        entities: 20,
        attributes_per_entity: 8,
        fabricated_attributes: 4,
        fabrication_rate: 0.4,
        answer_consistency: 0.2,
        ..WorldConfig::default()
    }
}

#[test]
fn criterion_4_end_to_end_separation() {
    let start = Instant::now();
    let deltas: Vec<f64> = (0..10u64)
        .map(|seed| {
            let pipe_cfg = PipelineConfig {
                n_samples: 5,
                seed,
                with_support_stage: false,
                ..PipelineConfig::default()
            };
            let (_, scores, labels) = run_world(
                &separation_world(seed),
                &pipe_cfg,
                KernelSpec::Exp { lambda: 1.0 },
            );
            let iuq = auroc_of(&scores, &labels, method::IUQ).expect("iuq auroc");
            let s = auroc_of(&scores, &labels, method::ENTAILMENT).expect("s auroc");
            iuq - s
        })
        .collect();
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let elapsed = start.elapsed();
    assert!(
        mean_delta >= 0.03,
        "mean AUROC(IUQ) - AUROC(S) = {mean_delta:.4} < 0.03 (per-seed {deltas:?})"
    );
    assert!(elapsed.as_secs_f64() < 120.0, "runtime {elapsed:?} exceeds 2 min");
    println!(
        "PASS criterion 4: end-to-end separation (mean delta {mean_delta:.4} over 10 seeds) in {elapsed:?}"
    );
}

fn context_driven_world(seed: u64) -> WorldConfig {
    WorldConfig {
        seed,
        entities: 20,
        attributes_per_entity: 8,
        fabricated_attributes: 4,
        fabrication_rate: 0.4,
        answer_consistency: 0.2,
        context_driven: true,
        restate_premise: true,
        ..WorldConfig::default()
    }
}

#[test]
fn criterion_5_directionality() {
    let start = Instant::now();
    let mut iuq_mean = 0.0;
    let mut rev_mean = 0.0;
    for seed in 0..10u64 {
        let pipe_cfg = PipelineConfig {
            n_samples: 5,
            seed,
            dual_direction: true,
            with_support_stage: false,
            ..PipelineConfig::default()
        };
        let (_, scores, labels) = run_world(
            &context_driven_world(seed),
            &pipe_cfg,
            KernelSpec::Exp { lambda: 1.0 },
        );
        let iuq = auroc_of(&scores, &labels, method::IUQ).expect("iuq auroc");
        let rev = auroc_of(&scores, &labels, method::IUQ_REV).expect("iuq-rev auroc");
        iuq_mean += iuq / 10.0;
        rev_mean += rev / 10.0;
    }
    let elapsed = start.elapsed();
    assert!(
        iuq_mean >= rev_mean,
        "forward AUROC {iuq_mean:.4} < reversed AUROC {rev_mean:.4}"
    );
    assert!(elapsed.as_secs_f64() < 120.0, "runtime {elapsed:?} exceeds 2 min");
    println!(
        "PASS criterion 5: directionality (forward {iuq_mean:.4} >= reversed {rev_mean:.4}, 10 seeds) in {elapsed:?}"
    );
}

#[test]
fn criterion_6_generation_count_monotonicity() {
    let start = Instant::now();
    let n_values = [1usize, 2, 3, 5];
    let mut s_sums = vec![0.0; n_values.len()];
    let mut iuq_sums = vec![0.0; n_values.len()];
    let seeds = 20u64;
    for seed in 0..seeds {
        let pipe_cfg = PipelineConfig {
            n_samples: 5,
            seed,
            with_support_stage: false,
            ..PipelineConfig::default()
        };
        let (artifacts, scores, labels) = run_world(
            &separation_world(seed + 100),
            &pipe_cfg,
            KernelSpec::Exp { lambda: 1.0 },
        );
        let rows =
            evaluation::ablate_num_generations(&artifacts, &scores, &labels, &n_values, true);
        for (i, row) in rows.iter().enumerate() {
            assert!(row.skipped.is_none(), "n = {} skipped: {:?}", row.n, row.skipped);
            for (name, value) in &row.aurocs {
                let v = value.expect("auroc defined");
                if name == method::ENTAILMENT {
                    s_sums[i] += v / seeds as f64;
                } else if name == method::IUQ {
                    iuq_sums[i] += v / seeds as f64;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    for sums in [&s_sums, &iuq_sums] {
        for window in sums.windows(2) {
            assert!(
                window[1] >= window[0],
                "mean AUROC decreased: {sums:?} (S {s_sums:?}, IUQ {iuq_sums:?})"
            );
        }
    }
    assert!(elapsed.as_secs_f64() < 180.0, "runtime {elapsed:?} exceeds 3 min");
    println!(
        "PASS criterion 6: generation-count monotonicity (S {s_sums:?}, IUQ {iuq_sums:?}) in {elapsed:?}"
    );
}

#[test]
fn criterion_7_resumability() {
    let start = Instant::now();
    let world_cfg = WorldConfig {
        seed: 77,
        entities: 3,
        attributes_per_entity: 4,
        fabricated_attributes: 2,
        fabrication_rate: 0.4,
        answer_consistency: 0.2,
        ..WorldConfig::default()
    };
    let pipe_cfg = PipelineConfig {
        n_samples: 3,
        n_answers: 2,
        seed: 7,
        ..PipelineConfig::default()
    };

    let run = |interrupt: bool| -> (tempfile::TempDir, iuq_core::store::RunManifest) {
        let world = build_world(&world_cfg).expect("world builds");
        let dataset = world.dataset();
        let client = fast_client(&world_cfg);
        let dir = tempfile::tempdir().expect("tempdir");
        let snapshot = pipeline::config_snapshot(&pipe_cfg, &client);
        let mut store =
            RunStore::open(dir.path(), &pipeline::run_id(&snapshot), snapshot.clone(), false)
                .expect("store opens");
        store.append(&dataset).expect("topics stored");
        if interrupt {
            // Kill after the question stage, then re-invoke on a fresh
            // process (fresh client, ledger restored from the manifest).
            pipeline::run_pipeline(&mut store, &client, &pipe_cfg, Some(PipelineStage::Questions))
                .expect("partial run");
            drop(store);
            drop(client);
            let client = fast_client(&world_cfg);
            let mut store = RunStore::open(
                dir.path(),
                &pipeline::run_id(&snapshot),
                snapshot,
                false,
            )
            .expect("store reopens");
            let before = store.manifest().ledger.clone();
            pipeline::run_pipeline(&mut store, &client, &pipe_cfg, None).expect("resumed run");
            let after = store.manifest().ledger.clone();
            // Zero duplicate ledger entries for the completed stages.
            for tag in [StageTag::DiverseGen, StageTag::ClaimExtract, StageTag::QuestionGen] {
                assert_eq!(
                    before.stage(tag).requests,
                    after.stage(tag).requests,
                    "stage {tag:?} repeated live requests on resume"
                );
            }
            let manifest = store.manifest().clone();
            (dir, manifest)
        } else {
            pipeline::run_pipeline(&mut store, &client, &pipe_cfg, None).expect("full run");
            let manifest = store.manifest().clone();
            (dir, manifest)
        }
    };

    let (dir_a, manifest_a) = run(false);
    let (dir_b, manifest_b) = run(true);

    // Record files must be byte-identical.
    for file in [
        "topics.jsonl",
        "responses.jsonl",
        "claims.jsonl",
        "questions.jsonl",
        "answers.jsonl",
        "contradictions.jsonl",
        "entailments.jsonl",
        "supports.jsonl",
    ] {
        let a = std::fs::read(dir_a.path().join(file)).unwrap_or_default();
        let b = std::fs::read(dir_b.path().join(file)).unwrap_or_default();
        assert_eq!(a, b, "{file} differs between uninterrupted and resumed runs");
    }
    // Manifests agree modulo timestamps.
    let mut a = manifest_a;
    let mut b = manifest_b;
    a.created_unix = 0;
    a.updated_unix = 0;
    b.created_unix = 0;
    b.updated_unix = 0;
    assert_eq!(a, b, "manifests differ beyond timestamps");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "runtime {elapsed:?} exceeds 1 min");
    println!("PASS criterion 7: resumability (byte-identical store, no duplicate ledger entries) in {elapsed:?}");
}

#[test]
fn criterion_8_cost_accounting() {
    let start = Instant::now();
    let world_cfg = WorldConfig {
        seed: 8,
        entities: 2,
        attributes_per_entity: 3,
        fabricated_attributes: 1,
        fabrication_rate: 0.5,
        answer_consistency: 0.2,
        ..WorldConfig::default()
    };
    let world = build_world(&world_cfg).expect("world builds");
    let dataset = world.dataset();

    // Wrap the raw backend so the test independently sums every non-cached
    // completion the client hands back.
    use iuq_core::backend::{CompletionRequest, RawCompleter, RawCompletion};
    use std::sync::atomic::{AtomicU64, Ordering};
    use std::sync::Arc;
    struct Recorder {
        inner: Box<dyn RawCompleter>,
        tokens: Arc<AtomicU64>,
    }
    impl RawCompleter for Recorder {
        fn backend_id(&self) -> String {
            self.inner.backend_id()
        }
        fn model_name(&self) -> String {
            self.inner.model_name()
        }
        fn supports_logprobs(&self) -> bool {
            self.inner.supports_logprobs()
        }
        fn complete_raw(
            &self,
            req: &CompletionRequest,
        ) -> Result<RawCompletion, iuq_core::backend::BackendError> {
            let raw = self.inner.complete_raw(req)?;
            let (p, c) = raw.usage.unwrap_or_else(|| {
                (
                    iuq_core::backend::whitespace_tokens(&req.prompt),
                    iuq_core::backend::whitespace_tokens(&raw.text),
                )
            });
            self.tokens.fetch_add(p + c, Ordering::SeqCst);
            Ok(raw)
        }
    }
    let tokens = Arc::new(AtomicU64::new(0));
    let backend = scripted_backend_from_world(world).expect("backend builds");
    let client = Client::with_options(
        Box::new(Recorder {
            inner: Box::new(backend),
            tokens: tokens.clone(),
        }),
        ClientOptions {
            max_retries: 1,
            backoff_base_ms: 0,
            max_in_flight: 4,
        },
    );

    let pipe_cfg = PipelineConfig {
        n_samples: 3,
        n_answers: 2,
        seed: 8,
        ..PipelineConfig::default()
    };
    let dir = tempfile::tempdir().expect("tempdir");
    let snapshot = pipeline::config_snapshot(&pipe_cfg, &client);
    let mut store = RunStore::open(dir.path(), &pipeline::run_id(&snapshot), snapshot, false)
        .expect("store opens");
    store.append(&dataset).expect("topics stored");
    pipeline::run_pipeline(&mut store, &client, &pipe_cfg, None).expect("pipeline");

    let ledger = client.ledger();
    assert_eq!(
        ledger.grand_total_tokens(),
        tokens.load(Ordering::SeqCst),
        "ledger grand total must equal the sum over non-cached completions"
    );

    // The cost report carries the stage-row layout: every pipeline stage
    // appears as its own row, plus an exact totals row.
    let rows = iuq_core::backend::ledger_report(&ledger, dataset.len());
    let names: Vec<&str> = rows.iter().map(|r| r.stage.as_str()).collect();
    assert_eq!(
        names,
        vec![
            "Greedy Gen.",
            "Diverse Gen.",
            "Claim Extraction",
            "Claim Correctness",
            "Claim Supportness",
            "Question Gen.",
            "Answer Gen.",
            "Contradiction Evaluation",
            "Total",
        ]
    );
    let total = rows.last().expect("totals row");
    assert_eq!(
        total.total_tokens,
        rows[..rows.len() - 1].iter().map(|r| r.total_tokens).sum::<u64>(),
        "grand total equals the sum of stage rows exactly"
    );

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "runtime {elapsed:?} exceeds 1 s");
    println!(
        "PASS criterion 8: cost accounting (grand total {} tokens, conserved) in {elapsed:?}",
        total.total_tokens
    );
}

#[test]
fn criterion_9_landscape_interpolation() {
    let start = Instant::now();
    let out = interpolate_to(&[0.0, 1.0], 4);
    let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    for (got, want) in out.iter().zip(want) {
        assert!((got - want).abs() <= 1e-12, "{got} != {want}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let len = rng.gen_range(1..=30);
        let seq: Vec<f64> = (0..len).map(|_| rng.gen::<f64>()).collect();
        let target = rng.gen_range(len..=60);
        let out = interpolate_to(&seq, target);
        assert_eq!(out.len(), target);
        assert!((out[0] - seq[0]).abs() <= 1e-12, "left endpoint drifted");
        assert!(
            (out[target - 1] - seq[len - 1]).abs() <= 1e-12,
            "right endpoint drifted"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "runtime {elapsed:?} exceeds 1 s");
    println!("PASS criterion 9: landscape interpolation in {elapsed:?}");
}
