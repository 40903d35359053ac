//! Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails. Criteria 4-9 share one set of training runs on the
//! default synthetic dataset.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mpaf_core::ablate::{component_cells, subset_cells, template_cells, train_and_test, Cell};
use mpaf_core::checkpoint::{Checkpoint, CONTEXT, VISUAL_PROMPTS};
use mpaf_core::config::{EncoderConfig, TrainConfig};
use mpaf_core::crossmodal::{image_text_loss, topk_sparse_similarity};
use mpaf_core::data::{generate_dataset, Dataset, Split, SyntheticSpec};
use mpaf_core::encoder::FrozenWeights;
use mpaf_core::export::region_means;
use mpaf_core::gradcheck::run_suite;
use mpaf_core::prompts::{token_level_alignment_loss, Temperature};
use mpaf_core::prototype::{compute_prototypes, select_subset};
use mpaf_core::tensorfile;
use mpaf_core::train::{train, RunSetup, TrainResult};
use mpaf_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const RUN_LIMIT_SECS: f64 = 15.0 * 60.0;

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
}

fn report(id: usize, pass: bool, detail: String) -> Outcome {
    println!("criterion {id:>2}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, pass, detail }
}

fn criterion_gradients() -> Outcome {
    let t = Instant::now();
    let reports = run_suite(100, 1000).expect("gradient suite");
    let secs = t.elapsed().as_secs_f64();
    let failing: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}({}/{} seed {:?})", r.kind.name(), r.failures, r.trials, r.first_failure))
        .collect();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    report(
        1,
        failing.is_empty() && secs < 120.0,
        format!(
            "{} losses x 100 instances, max rel err {worst:.2e}, {secs:.1}s {}",
            reports.len(),
            failing.join(" ")
        ),
    )
}

fn unit_gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn topk_oracle(locals: &[f32], text: &[f32], k: usize) -> f64 {
    let d = text.len();
    let mut sims: Vec<f64> = locals
        .chunks(d)
        .map(|row| row.iter().zip(text).map(|(a, b)| *a as f64 * *b as f64).sum())
        .collect();
    sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = k.min(sims.len());
    sims[..k].iter().sum::<f64>() / k as f64
}

fn criterion_oracles() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut topk_err = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=32);
        let d = rng.random_range(1..=16);
        let k = rng.random_range(1..=n + 2);
        let locals = unit_gaussian(&mut rng, n * d);
        let text = unit_gaussian(&mut rng, d);
        let tape = Tape::new();
        let v = topk_sparse_similarity(
            tape.constant(Tensor::new(&[n, d], locals.clone()).unwrap()),
            tape.constant(Tensor::new(&[d], text.clone()).unwrap()),
            k,
        )
        .unwrap();
        let got = v.value().data()[0] as f64;
        topk_err = topk_err.max((got - topk_oracle(&locals, &text, k)).abs());
    }

    let enc = EncoderConfig {
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        mlp_ratio: 2,
        projection_dim: 8,
        image_size: 8,
        patch_size: 4,
        ..EncoderConfig::default()
    };
    let weights = FrozenWeights::init(&enc, 3).unwrap();
    let mut proto_err = 0.0f64;
    for i in 0..1000u64 {
        let classes = rng.random_range(1..=4);
        let n = classes + rng.random_range(0..8);
        let mut labels: Vec<usize> = (0..n).map(|j| j % classes).collect();
        for j in (1..n).rev() {
            labels.swap(j, rng.random_range(0..=j));
        }
        let names: Vec<String> = (0..classes).map(|c| format!("c{c}")).collect();
        let images: Vec<Tensor> = (0..n)
            .map(|_| Tensor::new(&[8, 8, 1], unit_gaussian(&mut rng, 64)).unwrap())
            .collect();
        let subset = [None, Some(1), Some(2)][rng.random_range(0..3)];
        let table = compute_prototypes(&weights, &images, &labels, &names, subset, i).unwrap();
        let chosen = select_subset(&labels, &names, subset, i).unwrap();
        for (c, members) in chosen.iter().enumerate() {
            let mut mean = vec![0.0f64; enc.projection_dim];
            for &m in members {
                let g = weights.image_encode(&images[m], None).unwrap().global;
                mean.iter_mut().zip(g.data()).for_each(|(a, v)| *a += *v as f64);
            }
            for (j, a) in mean.iter().enumerate() {
                let want = a / members.len() as f64;
                proto_err = proto_err.max((table.prototype(c)[j] as f64 - want).abs());
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        2,
        topk_err <= 1e-6 && proto_err <= 1e-6 && secs < 60.0,
        format!("top-k max err {topk_err:.2e}, prototype max err {proto_err:.2e}, {secs:.1}s"),
    )
}

fn criterion_closed_forms() -> Outcome {
    let mut worst_ce = 0.0f64;
    for c in [2usize, 7, 8] {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::new(&[3, c], vec![0.25; 3 * c]).unwrap());
        let v = image_text_loss(logits, &[0, c - 1, c / 2], 0.07).unwrap();
        worst_ce = worst_ce.max((v.value().data()[0] as f64 - (c as f64).ln()).abs());
    }
    let mut worst_ta = 0.0f64;
    for tau in [0.07f32, 0.5] {
        for c in [2usize, 7, 8] {
            let d = 8;
            let mut eye = vec![0.0f32; c * d];
            (0..c).for_each(|i| eye[i * d + i] = 1.0);
            let tape = Tape::new();
            let basis = Tensor::new(&[c, d], eye).unwrap();
            let v = token_level_alignment_loss(
                tape.constant(basis.clone()),
                tape.constant(basis),
                Temperature::new(tau).unwrap(),
            )
            .unwrap();
            let e = (1.0 / tau as f64).exp();
            let want = -(e / (e + (c - 1) as f64)).ln();
            worst_ta = worst_ta.max((v.value().data()[0] as f64 - want).abs());
        }
    }
    report(
        3,
        worst_ce <= 1e-5 && worst_ta <= 1e-4,
        format!("uniform CE max err {worst_ce:.2e}, orthogonal L_ta max err {worst_ta:.2e}"),
    )
}

struct Run {
    accuracy: f64,
    secs: f64,
    result: TrainResult,
    dir: PathBuf,
}

fn run_cell(cell: &Cell, seed: u64, ds: &Dataset, root: &Path) -> Run {
    let mut config = cell.config.clone();
    config.set("seed", &seed.to_string()).unwrap();
    let dir = root.join(&cell.name).join(format!("seed{seed}"));
    std::fs::create_dir_all(&dir).unwrap();
    let t = Instant::now();
    let (accuracy, result) = train_and_test(&config, ds, Some(&dir)).unwrap();
    let secs = t.elapsed().as_secs_f64();
    eprintln!("  {:<20} seed {seed}: test {:.2}% in {secs:.0}s", cell.name, 100.0 * accuracy);
    Run { accuracy, secs, result, dir }
}

fn mean(runs: &[Run]) -> f64 {
    runs.iter().map(|r| r.accuracy).sum::<f64>() / runs.len() as f64
}

fn per_seed(runs: &[Run]) -> String {
    let v: Vec<String> = runs.iter().map(|r| format!("{:.2}", 100.0 * r.accuracy)).collect();
    v.join("/")
}

fn criterion_contract(base: &TrainConfig, run: &Run) -> Outcome {
    let enc = &base.encoder;
    let before = FrozenWeights::init(enc, base.weight_seed).unwrap().checksum();
    let after = run.result.setup.weights.checksum();
    let last = Checkpoint::load(&run.dir.join("final.ckpt")).unwrap();
    let init = tensorfile::load(&run.dir.join("init.ckpt")).unwrap();
    let fin = tensorfile::load(&run.dir.join("final.ckpt")).unwrap();
    let names_match = init.iter().map(|e| &e.0).eq(fin.iter().map(|e| &e.0));
    let changed: Vec<&str> = init
        .iter()
        .zip(&fin)
        .filter(|(a, b)| a.0 != "meta.epoch" && a.1.data() != b.1.data())
        .map(|(a, _)| a.0.as_str())
        .collect();
    let count = run.result.setup.trainable_parameters();
    let want = base.n_prompts * enc.num_layers * enc.embed_dim + base.context_len * enc.embed_dim;
    report(
        4,
        before == after
            && last.frozen_checksum == before
            && names_match
            && changed == [CONTEXT, VISUAL_PROMPTS]
            && count == want,
        format!("checksum unchanged {}, changed entries {changed:?}, trainable {count} (want {want})", before == after),
    )
}

fn criterion_saliency(spec: &SyntheticSpec, ds: &Dataset, run: &Run) -> Outcome {
    let model = run.result.last.model().unwrap();
    let test = ds.split(Split::Test);
    let maps = model.saliency(&test.images).unwrap();
    let inside = maps
        .iter()
        .zip(&test.labels)
        .filter(|(m, &label)| {
            let (i, o) = region_means(m.normalized.data(), &spec.region_mask(label));
            i > o
        })
        .count();
    let frac = inside as f64 / maps.len() as f64;
    report(
        9,
        frac >= 0.8,
        format!("inside > outside on {inside}/{} test images ({:.1}%)", maps.len(), 100.0 * frac),
    )
}

fn strip_seconds(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| match l.starts_with('#') {
            true => l.to_string(),
            false => l.rsplit_once(',').map_or(l, |(head, _)| head).to_string(),
        })
        .collect()
}

fn criterion_serialization(base: &TrainConfig, ds: &Dataset, root: &Path) -> Outcome {
    let mut config = base.clone();
    config.epochs = 2;
    let run = |name: &str| {
        let dir = root.join(name);
        train(&config, ds, RunSetup::new(&config, ds).unwrap(), Some(&dir)).unwrap();
        dir
    };
    let (a, b) = (run("repro_a"), run("repro_b"));
    let one = Checkpoint::load(&a.join("final.ckpt")).unwrap();
    let p = root.join("resaved.ckpt");
    one.save(&p).unwrap();
    let bytes_equal = std::fs::read(a.join("final.ckpt")).unwrap() == std::fs::read(&p).unwrap();
    let runs_equal = std::fs::read(a.join("final.ckpt")).unwrap() == std::fs::read(b.join("final.ckpt")).unwrap();
    let csv = |d: &Path| strip_seconds(&std::fs::read_to_string(d.join("metrics.csv")).unwrap());
    let metrics_equal = csv(&a) == csv(&b);
    report(
        10,
        bytes_equal && runs_equal && metrics_equal,
        format!(
            "save/load/save identical {bytes_equal}, repeated checkpoints identical {runs_equal}, metrics identical (seconds column excluded) {metrics_equal}"
        ),
    )
}

fn main() {
    let mut outcomes = vec![criterion_gradients(), criterion_oracles(), criterion_closed_forms()];

    let tmp = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::new(7, 200);
    let data_dir = tmp.path().join("data");
    generate_dataset(&spec, &data_dir, false).unwrap();
    let ds = Dataset::load(&data_dir).unwrap();
    let base = TrainConfig {
        dataset: data_dir.clone(),
        fixtures: Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/expressions7.txt"),
        ..TrainConfig::default()
    };
    let root = tmp.path().join("runs");

    let mut cells = component_cells(&base);
    cells.extend(template_cells(&base).into_iter().filter(|c| c.name == "template1_no_spa"));
    cells.extend(subset_cells(&base, &[Some(1), Some(4)]));
    let mut runs: HashMap<String, Vec<Run>> = HashMap::new();
    for cell in &cells {
        let r = SEEDS.iter().map(|&s| run_cell(cell, s, &ds, &root)).collect();
        runs.insert(cell.name.clone(), r);
    }
    // The full model is the default config: template 3, beta = gamma = 1,
    // local alignment on, full prototype subset.
    let full = &runs["+local_topk"];

    outcomes.push(criterion_contract(&base, &full[0]));

    let slowest = full.iter().map(|r| r.secs).fold(0.0, f64::max);
    let above = full.iter().filter(|r| r.accuracy >= 0.9).count();
    outcomes.push(report(
        5,
        above == SEEDS.len() && slowest <= RUN_LIMIT_SECS,
        format!("test acc {}% ({above}/3 >= 90%), slowest run {slowest:.0}s", per_seed(full)),
    ));

    let ladder: Vec<(String, f64)> = cells[..5].iter().map(|c| (c.name.clone(), mean(&runs[&c.name]))).collect();
    let monotone = ladder.windows(2).all(|w| w[1].1 >= w[0].1);
    let gain = ladder[4].1 - ladder[0].1;
    let steps: Vec<String> = ladder.iter().map(|(n, m)| format!("{n} {:.2}", 100.0 * m)).collect();
    outcomes.push(report(
        6,
        monotone && gain >= 0.02,
        format!("means {} ; full - baseline {:+.2} points", steps.join(" -> "), 100.0 * gain),
    ));

    let (t3, t1) = (mean(full), mean(&runs["template1_no_spa"]));
    outcomes.push(report(
        7,
        t3 >= t1,
        format!("template3+spa {:.2} vs template1 no spa {:.2}", 100.0 * t3, 100.0 * t1),
    ));

    let subsets = [mean(&runs["subset_1"]), mean(&runs["subset_4"]), mean(full)];
    outcomes.push(report(
        8,
        subsets.windows(2).all(|w| w[1] >= w[0]),
        format!(
            "subset 1 {:.2}, 4 {:.2}, full {:.2}",
            100.0 * subsets[0],
            100.0 * subsets[1],
            100.0 * subsets[2]
        ),
    ));

    outcomes.push(criterion_saliency(&spec, &ds, &full[0]));
    outcomes.push(criterion_serialization(&base, &ds, tmp.path()));

    outcomes.sort_by_key(|o| o.id);
    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!("summary: {}/{} criteria pass", outcomes.len() - failed.len(), outcomes.len());
    for o in &failed {
        println!("failed {}: {}", o.id, o.detail);
    }
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
