use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use weakpoly::budget::AnnotationPolicy;
use weakpoly::detector::{Candidate, DetectorConfig, DetectorState};
use weakpoly::em::EmConfig;
use weakpoly::geometry::{polygon_iou, Polygon};
use weakpoly::scene::{synth_dataset, write_dataset, ImageRecord, SceneImage, SynthParams};
use weakpoly::weak_labels::{AnnotationCost, WeakKind};
use weakpoly_cli::*;

fn small_params() -> SynthParams {
    SynthParams {
        feature_dim: 4,
        ..SynthParams::default()
    }
}

fn synth_into(dir: &Path, name: &str, scenes: usize, seed: u64) -> PathBuf {
    let cfg = SynthConfig {
        output: dir.join(name),
        scenes,
        rng_seed: seed,
        scene: small_params(),
    };
    cmd_synth(&cfg, false).unwrap();
    cfg.output
}

fn experiment(dir: &Path, dataset: PathBuf, kind: WeakKind, strong_fraction: f64, out: &str) -> ExperimentConfig {
    ExperimentConfig {
        dataset,
        eval_dataset: None,
        weak_kind: kind,
        strong_fraction,
        output_dir: dir.join(out),
        rng_seed: 11,
        em: EmConfig {
            epochs_per_mstep: 2,
            rounds_tag_coarse: 2,
            rounds_tight_loose: 1,
            ..EmConfig::default()
        },
    }
}

#[test]
fn synth_zero_scenes_is_a_valid_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = synth_into(dir.path(), "empty.json", 0, 1);
    let (f, records) = load_dataset(&path).unwrap();
    assert_eq!(f, 4);
    assert!(records.is_empty());
}

#[test]
fn synth_is_byte_identical_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth_into(dir.path(), "a.json", 6, 42);
    let b = synth_into(dir.path(), "b.json", 6, 42);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let (_, loaded) = load_dataset(&a).unwrap();
    assert_eq!(loaded, synth_dataset(6, 42, &small_params()).unwrap());

    let meta: serde_json::Value = serde_json::from_slice(&fs::read(sidecar(&a, "meta")).unwrap()).unwrap();
    let ma: serde_json::Value = serde_json::from_slice(&fs::read(sidecar(&b, "meta")).unwrap()).unwrap();
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);
    // the output path is not part of the hash
    assert_eq!(meta["config_hash"], ma["config_hash"]);
}

#[test]
fn synth_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        output: dir.path().join("d.json"),
        scenes: 2,
        rng_seed: 3,
        scene: small_params(),
    };
    cmd_synth(&cfg, false).unwrap();
    let err = cmd_synth(&cfg, false).unwrap_err();
    assert_eq!(err.kind(), "exists");
    cmd_synth(&cfg, true).unwrap();
}

#[test]
fn synth_config_paths_resolve_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("synth.toml");
    fs::write(&cfg_path, "output = \"out/d.json\"\nscenes = 3\nrng_seed = 5\n[scene]\nfeature_dim = 4\n").unwrap();
    let cfg = load_synth_config(&cfg_path).unwrap();
    assert_eq!(cfg.output, dir.path().join("out/d.json"));
    assert_eq!(cfg.scene.width, SynthParams::default().width);

    fs::write(&cfg_path, "output = \"d.json\"\nscenes = 3\nrng_seed = 5\nbogus = 1\n").unwrap();
    assert_eq!(load_synth_config(&cfg_path).unwrap_err().kind(), "config");
    fs::write(&cfg_path, "output = \"d.json\"\nscenes = 3\nrng_seed = 5\n[scene]\nfeature_dim = 1\n").unwrap();
    assert_eq!(load_synth_config(&cfg_path).unwrap_err().kind(), "config");
}

fn weaken(dir: &Path, input: &Path, kind: WeakKind) -> (Vec<ImageRecord>, TruthFile) {
    let args = WeakenArgs {
        dataset: input.to_owned(),
        kind,
        rng_seed: 9,
        output: dir.join(format!("{kind:?}.json")),
    };
    cmd_weaken(&args, false).unwrap();
    let (_, records) = load_dataset(&args.output).unwrap();
    let truth: TruthFile = serde_json::from_slice(&fs::read(sidecar(&args.output, "truth")).unwrap()).unwrap();
    (records, truth)
}

#[test]
fn weaken_tag_on_empty_record_has_no_text() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("blank.json");
    let rec = ImageRecord {
        id: "blank".into(),
        image: SceneImage::zeros(16, 16, 2),
        strong: Some(Vec::new()),
        weak: None,
    };
    write_dataset(fs::File::create(&path).unwrap(), 2, &[rec]).unwrap();
    let (records, truth) = weaken(dir.path(), &path, WeakKind::Tag);
    let w = records[0].weak.as_ref().unwrap();
    assert_eq!(w.kind, WeakKind::Tag);
    assert!(!w.has_text);
    assert!(truth.truth["blank"].is_empty());
}

#[test]
fn weaken_box_counts_and_truth_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth_into(dir.path(), "d.json", 8, 21);
    let (_, original) = load_dataset(&input).unwrap();

    let (tight, truth) = weaken(dir.path(), &input, WeakKind::Tight);
    let (coarse, _) = weaken(dir.path(), &input, WeakKind::Coarse);
    for ((o, t), c) in original.iter().zip(&tight).zip(&coarse) {
        let polys = o.strong.as_ref().unwrap();
        assert!(t.strong.is_none() && c.strong.is_none());
        assert_eq!(t.weak.as_ref().unwrap().boxes.len(), polys.len());
        let n_coarse = c.weak.as_ref().unwrap().boxes.len();
        assert!(n_coarse <= polys.len() && (n_coarse > 0) == !polys.is_empty());
        // the sidecar holds the exact polygons
        let kept = &truth.truth[&o.id];
        assert_eq!(kept.len(), polys.len());
        for (k, p) in kept.iter().zip(polys) {
            assert!(k.iter().zip(p.vertices()).all(|(a, v)| a[0] == v.x && a[1] == v.y));
        }
    }
}

#[test]
fn weaken_requires_polygon_labels() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth_into(dir.path(), "d.json", 2, 1);
    let (weak, _) = weaken(dir.path(), &input, WeakKind::Tag);
    assert!(weak[0].strong.is_none());
    let args = WeakenArgs {
        dataset: dir.path().join("Tag.json"),
        kind: WeakKind::Tight,
        rng_seed: 0,
        output: dir.path().join("again.json"),
    };
    assert_eq!(cmd_weaken(&args, false).unwrap_err().kind(), "missing_truth");
}

#[test]
fn em_writes_one_row_per_round_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_into(dir.path(), "d.json", 16, 4);
    let a = experiment(dir.path(), data.clone(), WeakKind::Coarse, 0.25, "a");
    let b = experiment(dir.path(), data, WeakKind::Coarse, 0.25, "b");
    let ha = cmd_em(&a, false).unwrap();
    let hb = cmd_em(&b, false).unwrap();
    assert_eq!(ha, hb);
    for name in EM_OUTPUTS {
        assert!(a.output_dir.join(name).is_file(), "{name}");
    }
    for name in ["report.csv", "report.json", "model.json"] {
        assert_eq!(fs::read(a.output_dir.join(name)).unwrap(), fs::read(b.output_dir.join(name)).unwrap(), "{name}");
    }
    let report: EmReportFile = serde_json::from_slice(&fs::read(a.output_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.rounds.len(), a.em.rounds_tag_coarse + 1);
    assert_eq!(report.config_hash, ha);
    let csv = fs::read_to_string(a.output_dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), report.rounds.len() + 1);

    assert_eq!(cmd_em(&a, false).unwrap_err().kind(), "exists");
    cmd_em(&a, true).unwrap();
    assert_eq!(fs::read(a.output_dir.join("report.json")).unwrap(), fs::read(b.output_dir.join("report.json")).unwrap());
}

#[test]
fn em_with_all_strong_runs_one_supervised_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_into(dir.path(), "d.json", 6, 8);
    let cfg = experiment(dir.path(), data, WeakKind::Tag, 1.0, "full");
    cmd_em(&cfg, false).unwrap();
    let report: EmReportFile = serde_json::from_slice(&fs::read(cfg.output_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.rounds.len(), 1);
    assert_eq!(report.rounds[0].round, 0);
}

#[test]
fn experiment_config_loads_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path(), "d.json", 2, 1);
    let path = dir.path().join("exp.toml");
    let body = "dataset = \"d.json\"\nweak_kind = \"loose\"\nstrong_fraction = 0.1\noutput_dir = \"run\"\nrng_seed = 2\n";
    fs::write(&path, format!("{body}[em]\nepochs_per_mstep = 3\n[em.loss]\nlambda1 = 2.0\n")).unwrap();
    let cfg = load_experiment_config(&path).unwrap();
    assert_eq!(cfg.dataset, dir.path().join("d.json"));
    assert_eq!(cfg.output_dir, dir.path().join("run"));
    assert_eq!(cfg.weak_kind, WeakKind::Loose);
    assert_eq!(cfg.em.epochs_per_mstep, 3);
    assert_eq!(cfg.em.loss.lambda1, 2.0);
    assert_eq!(cfg.em.confidence_threshold, EmConfig::default().confidence_threshold);

    fs::write(&path, body.replace("d.json", "missing.json")).unwrap();
    assert_eq!(load_experiment_config(&path).unwrap_err().kind(), "config");
    fs::write(&path, body.replace("0.1", "1.5")).unwrap();
    assert_eq!(load_experiment_config(&path).unwrap_err().kind(), "config");
    fs::write(&path, format!("{body}[em]\nconfidence_threshold = 2.0\n")).unwrap();
    assert_eq!(load_experiment_config(&path).unwrap_err().kind(), "config");
}

fn zero_model(dir: &Path, feature_dim: usize) -> PathBuf {
    let path = dir.join(format!("zero{feature_dim}.json"));
    let state = DetectorState::zeros(DetectorConfig::new(feature_dim));
    fs::write(&path, state.to_json().unwrap()).unwrap();
    path
}

#[test]
fn eval_of_an_empty_model_has_zero_recall() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_into(dir.path(), "d.json", 4, 2);
    let out = cmd_eval(&default_eval_args(zero_model(dir.path(), 4), data), false).unwrap();
    assert!(out.metrics.n_truths > 0);
    assert_eq!(out.metrics.recall, 0.0);
    assert_eq!(out.metrics.n_dets, 0);
}

#[test]
fn eval_rejects_a_feature_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_into(dir.path(), "d.json", 1, 2);
    let err = cmd_eval(&default_eval_args(zero_model(dir.path(), 6), data), false).unwrap_err();
    assert!(matches!(err, CliError::DimensionMismatch { model: 6, dataset: 4 }));
}

#[test]
fn eval_of_replayed_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_into(dir.path(), "d.json", 5, 6);
    let (_, records) = load_dataset(&data).unwrap();
    let truths: Vec<&[Polygon]> = records.iter().map(|r| r.strong.as_deref().unwrap()).collect();
    let dets: Vec<Vec<Candidate>> = truths
        .iter()
        .map(|ps| {
            ps.iter()
                .map(|p| Candidate {
                    bbox: p.bbox(),
                    polygon: p.clone(),
                    score: 1.0,
                })
                .collect()
        })
        .collect();
    let m = weakpoly::evaluation::evaluate_split(dets.iter().map(Vec::as_slice).zip(truths), 0.5);
    assert_eq!(m.f_measure, 1.0);
    assert!(m.n_truths > 0);
}

/// Greedy one-to-one matching in descending score order, written out
/// independently of the library matcher.
fn recount(dets: &[Candidate], truths: &[Polygon], thresh: f64) -> usize {
    let mut order: Vec<&Candidate> = dets.iter().collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut used = vec![false; truths.len()];
    let mut hits = 0;
    for d in order {
        let best = (0..truths.len())
            .filter(|&j| !used[j])
            .map(|j| (j, polygon_iou(&d.polygon, &truths[j])))
            .filter(|&(_, iou)| iou >= thresh)
            .fold(None::<(usize, f64)>, |acc, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
        if let Some((j, _)) = best {
            used[j] = true;
            hits += 1;
        }
    }
    hits
}

#[test]
fn eval_metrics_match_a_recount_of_the_detections_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_into(dir.path(), "d.json", 24, 13);
    let cfg = experiment(dir.path(), data.clone(), WeakKind::Tight, 0.5, "run");
    cmd_em(&cfg, false).unwrap();

    let mut args = default_eval_args(cfg.output_dir.join("model.json"), data.clone());
    args.score_floor = 0.2;
    args.output = Some(dir.path().join("metrics.json"));
    args.detections = Some(dir.path().join("dets.json"));
    let out = cmd_eval(&args, false).unwrap();
    let written: MetricsFile = serde_json::from_slice(&fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(written.metrics, out.metrics);
    assert_eq!(written.config_hash, out.config_hash);

    #[derive(serde::Deserialize)]
    struct Dets {
        config_hash: String,
        records: Vec<RecordDetections>,
    }
    let dets: Dets = serde_json::from_slice(&fs::read(dir.path().join("dets.json")).unwrap()).unwrap();
    assert_eq!(dets.config_hash, out.config_hash);
    let (_, records) = load_dataset(&data).unwrap();
    let (mut hits, mut n_dets, mut n_truths) = (0, 0, 0);
    for (r, d) in records.iter().zip(&dets.records) {
        assert_eq!(r.id, d.record_id);
        let truths = r.strong.as_ref().unwrap();
        hits += recount(&d.detections, truths, 0.5);
        n_dets += d.detections.len();
        n_truths += truths.len();
    }
    assert!(n_dets > 0);
    assert_eq!((hits, n_dets, n_truths), (out.metrics.matches, out.metrics.n_dets, out.metrics.n_truths));
    let (p, r) = (hits as f64 / n_dets as f64, hits as f64 / n_truths as f64);
    let f = if hits == 0 { 0.0 } else { 2.0 * p * r / (p + r) };
    assert!((out.metrics.f_measure - f).abs() < 1e-12);

    assert_eq!(cmd_eval(&args, false).unwrap_err().kind(), "exists");
}

#[test]
fn budget_reproduces_the_reference_allocations() {
    let out = cmd_budget(&BudgetArgs::default()).unwrap();
    let by_name = |n: &str| out.plans.iter().find(|p| p.name == n).unwrap();
    assert_eq!(by_name("Strong").image_amount, "710");
    assert_eq!(by_name("Equal Time").image_amount, "560+58+81+152+1144");
    assert_eq!(by_name("Equal Number").image_amount, "560+108+108+108+108");
    assert!(out.plans.iter().all(|p| p.allocation.total_cost <= out.budget));
    assert_eq!(out.config_hash, cmd_budget(&BudgetArgs::default()).unwrap().config_hash);

    let csv = budget_csv(&out);
    assert_eq!(csv.lines().count(), out.plans.len() + 1);
    assert!(csv.contains("\nStrong,710,Poly,"));
}

#[test]
fn budget_costs_file_overrides_single_entries() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("costs.toml");
    fs::write(&path, "polygon = 61.0\n").unwrap();
    let costs = load_costs(&path).unwrap();
    assert_eq!(costs.polygon, 61.0);
    assert_eq!(costs.tag, AnnotationCost::<f64>::default().tag);
    let args = BudgetArgs {
        policies: vec![AnnotationPolicy::Strong],
        costs,
        ..BudgetArgs::default()
    };
    let out = cmd_budget(&args).unwrap();
    assert_eq!(out.plans[0].allocation.poly, 708);
    assert_ne!(out.config_hash, cmd_budget(&BudgetArgs::default()).unwrap().config_hash);

    fs::write(&path, "tag = -2.0\n").unwrap();
    assert_eq!(load_costs(&path).unwrap_err().kind(), "config");
    fs::write(&path, "pencil = 1.0\n").unwrap();
    assert_eq!(load_costs(&path).unwrap_err().kind(), "config");
}

#[test]
fn binary_reports_structured_errors() {
    let bin = env!("CARGO_BIN_EXE_weakpoly");
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin)
        .args(["em", "--config"])
        .arg(dir.path().join("nope.toml"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");
    assert!(err["error"]["message"].as_str().unwrap().contains("nope.toml"));

    let csv = dir.path().join("t.csv");
    let out = Command::new(bin)
        .args(["budget", "--policy", "equal-number", "--csv"])
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["plans"][0]["image_amount"], "560+108+108+108+108");
    assert!(fs::read_to_string(&csv).unwrap().starts_with("policy,"));

    let out = Command::new(bin).args(["weaken", "--kind", "polygon"]).output().unwrap();
    assert!(!out.status.success());
}
