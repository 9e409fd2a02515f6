//! Metrics, parameter accounting, sweeps, checkpoints and embedding export.

mod common;

use promptmoe::backbone::BackboneConfig;
use promptmoe::checkpoint::{self, CheckpointMeta};
use promptmoe::harness::{
    chance_sigma, evaluate, export_embeddings, report_params, run_ablation, run_stage_a, run_stage_b,
    ExperimentSpec, MetricsReport, RegimeKind, Stage,
};
use promptmoe::model::{ModelConfig, MoeModel};
use promptmoe::param::Parameters;
use promptmoe::prompt::PromptBank;
use promptmoe::router::RouterInput;
use promptmoe::synth::{build_dataset, Dataset, DatasetSpec};
use promptmoe::train::{prepare_model, AdaptationRegime, SpecSet, TrainConfig};
use proptest::prelude::*;

proptest! {
    #[test]
    fn confusion_matrix_identities(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200)) {
        let (pred, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let r = MetricsReport::from_predictions(&pred, &labels, 4).unwrap();
        for c in 0..4 {
            let actual = labels.iter().filter(|&&y| y == c).count();
            prop_assert_eq!(r.confusion[c].iter().sum::<usize>(), actual);
        }
        let trace: usize = (0..4).map(|c| r.confusion[c][c]).sum();
        prop_assert!((r.accuracy - trace as f64 / labels.len() as f64).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&r.macro_f1));
    }
}

#[test]
fn full_size_parameter_report() {
    let base = MoeModel::new(ModelConfig::default(), 1).unwrap();
    let frozen = report_params(&base, &AdaptationRegime::FrozenExpert).unwrap();
    assert_eq!(frozen.backbone_trainable, 0);
    assert_eq!(frozen.prompt_trainable, 0);

    let pft = report_params(&base, &AdaptationRegime::pft(12)).unwrap();
    assert_eq!(pft.backbone_trainable, 3 * 2 * 198_272);

    let rf = AdaptationRegime::RfPrompt { prompt_len: 16 };
    let m = prepare_model(&base, &rf, 5, 0.02, 1).unwrap();
    let r = report_params(&m, &rf).unwrap();
    assert_eq!(r.backbone_trainable, 0);
    assert_eq!(r.prompt_trainable, 73_728);
    let row = |item: &str| r.rows.iter().find(|x| x.item == item).unwrap();
    assert_eq!(row("prompts").delta(), Some(0.0));
    assert!(row("router").delta().unwrap().abs() <= 1000.0);
    assert_ne!(row("head").delta(), Some(0.0));
    assert_ne!(row("trainable").delta(), Some(0.0));
    assert!((r.trainable_fraction - r.trainable as f64 / r.total as f64).abs() < 1e-12);
    assert_eq!(r.total, m.param_count());
    let text = r.render();
    assert!(text.contains("73728") && text.contains("claimed"));
}

#[test]
fn prompt_counts_by_enumeration() {
    for (p, want) in [(8, 36_864), (12, 55_296), (16, 73_728), (20, 92_160), (32, 147_456)] {
        let bank = PromptBank::init(p, 128, 12, 3, 0.02, 0).unwrap();
        let stored: usize = bank.params().iter().map(|t| t.value.data().len()).sum();
        assert_eq!(stored, want);
        assert_eq!(bank.params().len(), 36);
    }
}

fn tiny_model(classes: usize, seed: u64) -> MoeModel {
    MoeModel::new(
        ModelConfig {
            backbone: BackboneConfig {
                d_model: 8,
                n_layers: 2,
                n_heads: 2,
                ffn_mult: 2,
                patch_size: 32,
                final_norm: false,
            },
            classes,
            top_k: 2,
            router_input: RouterInput::EmbedderMeanPool,
            head_hidden: 8,
        },
        seed,
    )
    .unwrap()
}

fn tiny_target() -> Dataset {
    let mut s = DatasetSpec::default_target();
    s.per_class_count = 20;
    build_dataset(&s).unwrap()
}

fn tiny_spec(stage: Stage) -> ExperimentSpec {
    let mut s = ExperimentSpec::new(stage);
    s.caps = vec![2, 4];
    s.shots = vec![0, 2, 4];
    s.prompt_lengths = vec![1, 2];
    s.train = TrainConfig {
        max_epochs: 3,
        router_warmup_epochs: 1,
        warmup_epochs: 1.0,
        batch_size: 4,
        ..TrainConfig::default()
    };
    s
}

#[test]
fn stage_a_grid_is_complete_and_reproducible() {
    let base = tiny_model(5, 2);
    let ds = [tiny_target()];
    let spec = tiny_spec(Stage::A);
    let t = run_stage_a(&spec, &base, &ds).unwrap();
    assert_eq!(t.rows.len(), 3 * 2);
    assert!(t.rows.iter().all(|r| r.test_size == t.rows[0].test_size));
    let frozen: Vec<_> = t.rows.iter().filter(|r| r.regime == "FrozenExpert").collect();
    assert!(frozen.iter().all(|r| r.backbone_checksum == base.backbone_checksum()));
    let csv = t.to_csv("0");
    assert!(csv.starts_with(&format!("# config_hash={} seeds=0\n", spec.config_hash().unwrap())));
    assert_eq!(csv.lines().count(), 2 + 6);
    assert_eq!(run_stage_a(&spec, &base, &ds).unwrap().to_csv("0"), csv);
    assert!(run_stage_b(&spec, &base, &ds).is_err(), "stage mismatch");
}

#[test]
fn stage_b_zero_shot_row_and_rank_summary() {
    let base = tiny_model(5, 2);
    let ds = [tiny_target()];
    let mut spec = tiny_spec(Stage::B);
    spec.regimes = vec![RegimeKind::Rfprompt];
    spec.prompt_len = 2;
    let t = run_stage_b(&spec, &base, &ds).unwrap();
    assert_eq!(t.rows.len(), 3);
    let k0 = &t.rows[0];
    assert_eq!((k0.axis_value, k0.train_size, k0.best_epoch), (0, 0, None));
    let n = k0.test_size;
    assert!((k0.report.accuracy - 0.2).abs() <= 3.0 * chance_sigma(5, n));
    assert!(t.render("0").contains("K"));
    assert!(t.summary.keys().all(|k| k.starts_with("spearman")));
}

#[test]
fn ablation_rows_share_the_frozen_backbone() {
    let base = tiny_model(5, 2);
    let ds = [tiny_target()];
    let t = run_ablation(&tiny_spec(Stage::Ablation), &base, &ds).unwrap();
    assert_eq!(t.rows.len(), 2);
    for (r, p) in t.rows.iter().zip([1, 2]) {
        assert_eq!(r.prompt_params, 3 * 2 * p * 8);
        assert_eq!(r.backbone_checksum, base.backbone_checksum());
    }
}

#[test]
fn checkpoint_file_reload_reproduces_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let rf = AdaptationRegime::RfPrompt { prompt_len: 2 };
    let m = prepare_model(&tiny_model(3, 5), &rf, 3, 0.02, 5).unwrap();
    let data = SpecSet::new(
        (0..9).map(|i| common::test_spectrogram(i, 1.0)).collect(),
        (0..9).map(|i| i % 3).collect(),
    )
    .unwrap();
    let mut meta = CheckpointMeta::for_model(&m, 5);
    meta.regime = Some(rf);
    checkpoint::save(&path, &m, &meta).unwrap();
    let (back, meta2) = checkpoint::load(&path).unwrap();
    assert_eq!(meta2.regime, meta.regime);
    let (a, b) = (evaluate(&m, &data).unwrap(), evaluate(&back, &data).unwrap());
    assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
    for s in &data.specs {
        let (x, y) = (m.predict(s, None).unwrap(), back.predict(s, None).unwrap());
        assert_eq!(x, y);
    }
}

#[test]
fn embedding_export_shape_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_model(3, 5);
    let data = SpecSet::new(
        (0..7).map(|i| common::test_spectrogram(i, 1.0)).collect(),
        (0..7).map(|i| i % 3).collect(),
    )
    .unwrap();
    let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert_eq!(export_embeddings(&m, &data, &p1).unwrap(), 7);
    export_embeddings(&m, &data, &p2).unwrap();
    let text = std::fs::read_to_string(&p1).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 8);
    assert_eq!(lines[0].split(',').count(), 9);
    assert!(lines[0].starts_with("label,z_0,") && lines[0].ends_with("z_7"));
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 9));
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

/// Target schemes under the source channel: no distribution shift.
fn control(per_class: usize) -> Dataset {
    let mut s = DatasetSpec::default_target();
    s.name = "control".into();
    s.channel = DatasetSpec::default_source().channel;
    s.per_class_count = per_class;
    build_dataset(&s).unwrap()
}

#[test]
fn frozen_expert_is_not_below_chance_on_the_control_task() {
    let base = tiny_model(5, 6);
    let ds = [control(40)];
    let mut spec = tiny_spec(Stage::A);
    spec.caps = vec![2, 10, 28];
    spec.regimes = vec![RegimeKind::Frozen];
    let t = run_stage_a(&spec, &base, &ds).unwrap();
    assert_eq!(t.rows.len(), 3);
    for r in &t.rows {
        let floor = 0.2 - 3.0 * chance_sigma(5, r.test_size);
        assert!(r.report.accuracy >= floor, "N={}: {} < {floor}", r.axis_value, r.report.accuracy);
    }
}

#[test]
fn rfprompt_accuracy_rises_with_shots() {
    let base = tiny_model(5, 7);
    let ds = [control(60)];
    let mut spec = tiny_spec(Stage::B);
    spec.shots = vec![0, 5, 40];
    spec.regimes = vec![RegimeKind::Rfprompt];
    spec.prompt_len = 2;
    spec.train.max_epochs = 15;
    spec.train.early_stop_patience = 15;
    let t = run_stage_b(&spec, &base, &ds).unwrap();
    let accs: Vec<f64> = t.rows.iter().map(|r| r.report.accuracy).collect();
    let rho = t.summary.values().next().copied().expect("one rank correlation");
    assert!(rho > 0.0, "spearman {rho} over accuracies {accs:?}");
}
