use std::path::{Path, PathBuf};

use mpaf_core::ablate::{component_cells, run_grid, train_and_test, Cell};
use mpaf_core::checkpoint::{Checkpoint, CONTEXT, VISUAL_PROMPTS};
use mpaf_core::config::{EncoderConfig, TrainConfig};
use mpaf_core::data::{generate_dataset, Dataset, Split, SyntheticSpec};
use mpaf_core::encoder::FrozenWeights;
use mpaf_core::eval::evaluate;
use mpaf_core::export::{export_projection, export_saliency};
use mpaf_core::tensorfile;
use mpaf_core::train::{metrics_csv, train, RunSetup, METRICS_HEADER};
use mpaf_core::Error;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/expressions7.txt")
}

fn small_config(dataset: &Path) -> TrainConfig {
    TrainConfig {
        encoder: EncoderConfig {
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
            projection_dim: 16,
            ..EncoderConfig::default()
        },
        epochs: 2,
        batch_size: 8,
        n_prompts: 2,
        context_len: 4,
        dataset: dataset.to_path_buf(),
        fixtures: fixtures(),
        ..TrainConfig::default()
    }
}

fn small_dataset(dir: &Path) -> Dataset {
    let mut spec = SyntheticSpec::new(7, 4);
    spec.val_per_class = 1;
    spec.test_per_class = 2;
    generate_dataset(&spec, dir, false).unwrap();
    Dataset::load(dir).unwrap()
}

#[test]
fn training_touches_only_prompts() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_dataset(&tmp.path().join("data"));
    let cfg = small_config(&ds.root);
    let setup = RunSetup::new(&cfg, &ds).unwrap();
    let e = &cfg.encoder;
    assert_eq!(
        setup.trainable_parameters(),
        cfg.n_prompts * e.num_layers * e.embed_dim + cfg.context_len * e.embed_dim
    );
    let before = FrozenWeights::init(e, cfg.weight_seed).unwrap().checksum();
    let out = tmp.path().join("run");
    let result = train(&cfg, &ds, setup, Some(&out)).unwrap();
    assert_eq!(result.setup.weights.checksum(), before);

    let init = tensorfile::load(&out.join("init.ckpt")).unwrap();
    let last = tensorfile::load(&out.join("final.ckpt")).unwrap();
    let changed: Vec<&str> = init
        .iter()
        .zip(&last)
        .filter(|(a, b)| {
            assert_eq!(a.0, b.0);
            a.1.data() != b.1.data() && !a.0.starts_with("meta.epoch")
        })
        .map(|(a, _)| a.0.as_str())
        .collect();
    assert_eq!(changed, [CONTEXT, VISUAL_PROMPTS]);
}

#[test]
fn metrics_reconstruct_total_and_runs_repeat() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_dataset(&tmp.path().join("data"));
    let mut cfg = small_config(&ds.root);
    cfg.beta = 0.7;
    cfg.gamma = 0.4;
    let run = |dir: &str| {
        let setup = RunSetup::new(&cfg, &ds).unwrap();
        let out = tmp.path().join(dir);
        train(&cfg, &ds, setup, Some(&out)).unwrap();
        out
    };
    let (a, b) = (run("a"), run("b"));
    let ra = Checkpoint::load(&a.join("final.ckpt")).unwrap();
    let rb = Checkpoint::load(&b.join("final.ckpt")).unwrap();
    assert_eq!(ra.to_bytes(), rb.to_bytes());

    let strip = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p.join("metrics.csv"))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));

    let text = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(text.lines().any(|l| l == METRICS_HEADER));
    assert!(text.starts_with("# "));
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip_while(|l| *l != METRICS_HEADER)
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), cfg.epochs);
    for r in rows {
        let recon = r[2] + 0.7 * (r[3] + r[4]) + 0.4 * r[5];
        assert!((r[1] - recon).abs() < 1e-5, "{} vs {recon}", r[1]);
    }
}

#[test]
fn checkpoint_save_load_save_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_dataset(&tmp.path().join("data"));
    let cfg = small_config(&ds.root);
    let result = train(&cfg, &ds, RunSetup::new(&cfg, &ds).unwrap(), None).unwrap();
    let p1 = tmp.path().join("one.ckpt");
    let p2 = tmp.path().join("two.ckpt");
    result.last.save(&p1).unwrap();
    Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let a = evaluate(&result.last, &ds, Split::Test).unwrap();
    let b = evaluate(&Checkpoint::load(&p2).unwrap(), &ds, Split::Test).unwrap();
    assert_eq!(a, b);
}

#[test]
fn evaluation_refuses_other_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_dataset(&tmp.path().join("data"));
    let cfg = small_config(&ds.root);
    let result = train(&cfg, &ds, RunSetup::new(&cfg, &ds).unwrap(), None).unwrap();
    let mut spec8 = SyntheticSpec::new(8, 2);
    spec8.test_per_class = 1;
    spec8.val_per_class = 1;
    let other = tmp.path().join("eight");
    generate_dataset(&spec8, &other, false).unwrap();
    let err = evaluate(&result.last, &Dataset::load(&other).unwrap(), Split::Test).unwrap_err();
    match err {
        Error::HashMismatch { checkpoint, dataset } => assert_ne!(checkpoint, dataset),
        e => panic!("{e:?}"),
    }
    let report = evaluate(&result.last, &ds, Split::Test).unwrap();
    let rows: Vec<usize> = report.confusion.iter().map(|r| r.iter().sum()).collect();
    assert_eq!(rows, vec![2; 7]);
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_dataset(&tmp.path().join("data"));
    let mut cfg = small_config(&ds.root);
    cfg.tau_logits = 1e-45;
    let err = train(&cfg, &ds, RunSetup::new(&cfg, &ds).unwrap(), None).err().unwrap();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, step: 0, .. }), "{err:?}");
}

#[test]
fn single_cell_grid_matches_direct_run() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_dataset(&tmp.path().join("data"));
    let mut cfg = small_config(&ds.root);
    cfg.set("seed", "3").unwrap();
    let (direct, _) = train_and_test(&cfg, &ds, None).unwrap();
    let cell = Cell {
        name: "only".into(),
        config: cfg.clone(),
    };
    let grid = run_grid(&[cell], &[3], &ds, None).unwrap();
    assert_eq!(grid[0].accuracy, direct);
    assert_eq!(component_cells(&cfg).len(), 5);
}

#[test]
fn exports_have_expected_shapes_and_repeat() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_dataset(&tmp.path().join("data"));
    let cfg = small_config(&ds.root);
    let result = train(&cfg, &ds, RunSetup::new(&cfg, &ds).unwrap(), None).unwrap();
    let maps = export_saliency(&result.last, &ds, Split::Test, Some(3), &tmp.path().join("sal")).unwrap();
    assert_eq!(maps.len(), 3);
    for m in &maps {
        assert_eq!(m.normalized.shape(), &[32, 32]);
        let max = m.normalized.data().iter().cloned().fold(0.0f32, f32::max);
        assert!((max - 1.0).abs() < 1e-6);
    }
    assert!(tmp.path().join("sal/00002.pgm").exists());
    let csv = std::fs::read_to_string(tmp.path().join("sal/saliency.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let p1 = tmp.path().join("p1.csv");
    let p2 = tmp.path().join("p2.csv");
    export_projection(&result.last, &ds, Split::Test, &p1).unwrap();
    export_projection(&result.last, &ds, Split::Test, &p2).unwrap();
    let text = std::fs::read(&p1).unwrap();
    assert_eq!(text, std::fs::read(&p2).unwrap());
    assert_eq!(String::from_utf8(text).unwrap().lines().count(), ds.test.len() + 1);
}

#[test]
fn metrics_header_carries_config() {
    let cfg = TrainConfig::default();
    let text = metrics_csv(&cfg, &[]);
    let config: String = text
        .lines()
        .filter_map(|l| l.strip_prefix("# "))
        .map(|l| format!("{l}\n"))
        .collect();
    assert_eq!(TrainConfig::parse(&config).unwrap(), cfg);
}
