//! Acceptance gate: runs every criterion and prints one PASS/FAIL line each.

mod common;

use std::collections::HashSet;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use cirkit::clients::cache::CacheMode;
use cirkit::datamodel::{EvalProtocol, ProtocolName};
use cirkit::encoders::BackendConfig;
use cirkit::eval::{
    evaluate, evaluate_detailed, rank, recall_at_k, recall_subset_at_k, AblationMode, EmbeddingIndex,
    EvalOptions,
};
use cirkit::fusion::{
    batch_classification_loss, composed_loss, fuse_vectors, lambda_for, FusionParams, LossConfig,
};
use cirkit::encoders::Embedding;
use cirkit::model::CirModel;
use cirkit::trainer::{train, TrainConfig, TrainingSet, LOSS_LOG};
use cirkit::unify::render::{render_keywords_on_image, RenderStyle};
use cirkit::unify::text::{build_unified_textual_query, Caption, CaptionSource};
use image::{Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

fn report(n: u32, pass: bool, detail: &str) {
    println!("{} criterion {n}: {detail}", if pass { "PASS" } else { "FAIL" });
    if !pass {
        FAILURES.fetch_add(1, Ordering::SeqCst);
    }
}

static FAILURES: AtomicUsize = AtomicUsize::new(0);

fn main() {
    let criteria: [(u32, fn()); 7] = [
        (1, criterion_1_loss_identities),
        (2, criterion_2_gradient_check),
        (3, criterion_3_fusion_properties),
        (4, criterion_4_ranking_and_metrics_oracle),
        (5, criterion_5_unification_exactness),
        (6, criterion_6_toy_overfit),
        (7, criterion_7_determinism),
    ];
    let mut failed = 0;
    for (n, run) in criteria {
        let before = FAILURES.load(Ordering::SeqCst);
        if std::panic::catch_unwind(run).is_err() {
            println!("FAIL criterion {n}: panicked");
            failed += 1;
        } else if FAILURES.load(Ordering::SeqCst) > before {
            failed += 1;
        }
    }
    println!("acceptance: {} of 7 criteria passed", 7 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn emb(v: Vec<f64>) -> Embedding {
    Embedding {
        id: String::new(),
        vector: v,
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn criterion_1_loss_identities() {
    let start = Instant::now();
    let cfg = LossConfig { tau: 0.1 };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_single: f64 = 0.0;
    let mut worst_ln_b: f64 = 0.0;
    for _ in 0..100 {
        let q = emb(uniform(&mut rng, 8, 1.0));
        let t = emb(uniform(&mut rng, 8, 1.0));
        worst_single = worst_single.max(batch_classification_loss(&[q], &[t], &cfg).unwrap().abs());
        for b in [2usize, 3, 8, 16] {
            let target = uniform(&mut rng, 8, 1.0);
            let queries: Vec<Embedding> = (0..b).map(|_| emb(uniform(&mut rng, 8, 1.0))).collect();
            let targets: Vec<Embedding> = (0..b).map(|_| emb(target.clone())).collect();
            let l = batch_classification_loss(&queries, &targets, &cfg).unwrap();
            worst_ln_b = worst_ln_b.max((l - (b as f64).ln()).abs());
        }
    }
    let ortho = batch_classification_loss(
        &[emb(vec![1.0, 0.0]), emb(vec![0.0, 1.0])],
        &[emb(vec![1.0, 0.0]), emb(vec![0.0, 1.0])],
        &LossConfig { tau: 1.0 },
    )
    .unwrap();
    let expected = (1.0 + (-1.0f64).exp()).ln();
    let ortho_err = (ortho - expected).abs();
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst_single <= 1e-12 && worst_ln_b <= 1e-12 && ortho_err <= 1e-9 && elapsed < 1.0;
    report(
        1,
        pass,
        &format!(
            "max |L(B=1)| = {worst_single:.2e}, max |L - ln B| = {worst_ln_b:.2e}, \
             B=2 orthogonal {ortho:.9} (err {ortho_err:.2e}), {elapsed:.3} s"
        ),
    );
}

struct GradInstance {
    params: FusionParams,
    textual: Vec<Vec<f64>>,
    visual: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

fn loss_of(inst: &GradInstance) -> f64 {
    composed_loss(&inst.params, &inst.textual, &inst.visual, &inst.targets, &LossConfig { tau: 0.1 })
        .unwrap()
        .loss
}

/// Random instance whose hidden pre-activations all sit away from the ReLU kink.
fn grad_instance(rng: &mut ChaCha8Rng, b: usize, d: usize, h: usize) -> GradInstance {
    loop {
        let mut params = FusionParams::init(d, h, rng.random());
        params.w2 = uniform(rng, h, 1.0);
        params.b2 = rng.random_range(-0.5..0.5);
        let inst = GradInstance {
            params,
            textual: (0..b).map(|_| uniform(rng, d, 1.0)).collect(),
            visual: (0..b).map(|_| uniform(rng, d, 1.0)).collect(),
            targets: (0..b).map(|_| uniform(rng, d, 1.0)).collect(),
        };
        let p = &inst.params;
        let away_from_kink = inst.textual.iter().zip(&inst.visual).all(|(t, v)| {
            (0..h).all(|j| {
                let row = &p.w1[j * 2 * d..(j + 1) * 2 * d];
                let pre: f64 = p.b1[j]
                    + row[..d].iter().zip(t).map(|(a, b)| a * b).sum::<f64>()
                    + row[d..].iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
                pre.abs() > 1e-3
            })
        });
        if away_from_kink {
            return inst;
        }
    }
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let an: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = an.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn central_difference(inst: &mut GradInstance, pick: &dyn Fn(&mut GradInstance) -> &mut f64) -> f64 {
    const STEP: f64 = 1e-5;
    let orig = *pick(inst);
    *pick(inst) = orig + STEP;
    let plus = loss_of(inst);
    *pick(inst) = orig - STEP;
    let minus = loss_of(inst);
    *pick(inst) = orig;
    (plus - minus) / (2.0 * STEP)
}

fn criterion_2_gradient_check() {
    let start = Instant::now();
    let (b, d, h) = (4, 8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    for _ in 0..20 {
        let mut inst = grad_instance(&mut rng, b, d, h);
        let g = composed_loss(&inst.params, &inst.textual, &inst.visual, &inst.targets, &LossConfig { tau: 0.1 })
            .unwrap();
        let mut checks: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();

        let analytic = g.grad_params.slices().map(|s| s.to_vec());
        for (t, name) in FusionParams::NAMES.iter().enumerate() {
            let numeric: Vec<f64> = (0..analytic[t].len())
                .map(|k| central_difference(&mut inst, &|i| &mut i.params.slices_mut()[t][k]))
                .collect();
            checks.push((name.to_string(), analytic[t].clone(), numeric));
        }
        for (name, analytic, which) in [
            ("textual", &g.grad_textual, 0usize),
            ("visual", &g.grad_visual, 1),
            ("targets", &g.grad_targets, 2),
        ] {
            let flat: Vec<f64> = analytic.iter().flatten().copied().collect();
            let numeric: Vec<f64> = (0..b * d)
                .map(|k| {
                    central_difference(&mut inst, &|i| {
                        let rows = match which {
                            0 => &mut i.textual,
                            1 => &mut i.visual,
                            _ => &mut i.targets,
                        };
                        &mut rows[k / d][k % d]
                    })
                })
                .collect();
            checks.push((name.to_string(), flat, numeric));
        }
        for (name, a, n) in checks {
            let e = rel_err(&a, &n);
            if e > worst {
                worst = e;
                worst_name = name;
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        2,
        worst <= 1e-5 && elapsed < 10.0,
        &format!("worst relative error {worst:.2e} ({worst_name}) over 20 instances, {elapsed:.2} s"),
    );
}

fn criterion_3_fusion_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 16;
    let mut lambda_ok = true;
    let mut worst_fuse: f64 = 0.0;
    for i in 0..1000 {
        let scale = [1e-3, 1.0, 1e2, 1e4][i % 4];
        let mut params = FusionParams::init(d, d, rng.random());
        params.w2 = uniform(&mut rng, d, scale);
        params.b2 = rng.random_range(-scale..scale);
        let t = uniform(&mut rng, d, scale);
        let v = uniform(&mut rng, d, scale);
        let lambda = lambda_for(&params, &t, &v).unwrap();
        lambda_ok &= lambda > 0.0 && lambda < 1.0;
        let fused = fuse_vectors(&t, &v, lambda).unwrap();
        for k in 0..d {
            let oracle = lambda * t[k] + (1.0 - lambda) * v[k];
            worst_fuse = worst_fuse.max((fused[k] - oracle).abs());
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let prep = common::prepare_synthetic(dir.path(), CacheMode::Record);
    let mut model = CirModel::new(&BackendConfig::default(), None, 0, false).unwrap();
    model.fusion = FusionParams::zeros(model.dim(), model.dim());
    let protocol = EvalProtocol::standard(ProtocolName::Shoes);
    let opts = EvalOptions {
        keep_top: usize::MAX,
        ..EvalOptions::default()
    };
    let run = |mode| evaluate_detailed(&protocol, mode, &model, &prep.queries, &prep.resolver, None, &opts).unwrap();
    let (full, full_out) = run(AblationMode::Full);
    let (avg, avg_out) = run(AblationMode::AverageAddition);
    let same_rankings = full_out.len() == avg_out.len()
        && full_out.iter().zip(&avg_out).all(|(a, b)| a.top == b.top && a.target_rank == b.target_rank);
    let same_metrics = full.values == avg.values && full.average == avg.average;
    let all_half = full_out.iter().all(|o| o.lambda == Some(0.5));

    report(
        3,
        lambda_ok && worst_fuse <= 1e-9 && same_rankings && same_metrics && all_half,
        &format!(
            "lambda in (0,1) on 1000 inputs: {lambda_ok}, max fuse deviation {worst_fuse:.2e}, \
             zero head == average addition (rankings {same_rankings}, metrics {same_metrics}, lambda 0.5 {all_half})"
        ),
    );
}

fn brute_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Position of every candidate: the number of candidates that beat it.
fn brute_ranking(query: &[f64], ids: &[String], rows: &[Vec<f64>]) -> Vec<String> {
    let scores: Vec<f64> = rows.iter().map(|r| brute_cosine(query, r)).collect();
    let mut out = vec![String::new(); ids.len()];
    for i in 0..ids.len() {
        let beaten_by = (0..ids.len())
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && ids[j] < ids[i]))
            .count();
        out[beaten_by] = ids[i].clone();
    }
    out
}

fn brute_recall(positions: &[usize], k: usize) -> f64 {
    100.0 * positions.iter().filter(|&&p| p < k).count() as f64 / positions.len() as f64
}

fn criterion_4_ranking_and_metrics_oracle() {
    let start = Instant::now();
    let (n, d, queries_per) = (200, 16, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = Vec::new();
    let mut tie_groups = 0usize;
    for inst in 0..50 {
        let mut ids: Vec<String> = (0..n).map(|i| format!("c{i:03}")).collect();
        ids.shuffle(&mut rng);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            if i > 0 && rng.random_range(0..5) == 0 {
                let j = rng.random_range(0..i);
                rows.push(rows[j].clone());
                tie_groups += 1;
            } else {
                rows.push(uniform(&mut rng, d, 1.0));
            }
        }
        let index = EmbeddingIndex::new(ids.clone(), rows.clone()).unwrap();

        let mut rankings = Vec::new();
        let mut targets = Vec::new();
        let mut subsets = Vec::new();
        let mut positions = Vec::new();
        let mut subset_positions = Vec::new();
        for _ in 0..queries_per {
            let query = if rng.random_range(0..3) == 0 {
                rows[rng.random_range(0..n)].clone()
            } else {
                uniform(&mut rng, d, 1.0)
            };
            let got = rank(&query, &index, None).unwrap();
            let oracle = brute_ranking(&query, &ids, &rows);
            if got != oracle {
                mismatches.push(format!("instance {inst}: ranking differs"));
            }
            let target = ids[rng.random_range(0..n)].clone();
            let mut subset: Vec<String> = ids.sample(&mut rng, 6).cloned().collect();
            if !subset.contains(&target) {
                subset[0] = target.clone();
            }
            positions.push(oracle.iter().position(|id| *id == target).unwrap());
            let members: HashSet<&String> = subset.iter().collect();
            subset_positions.push(
                oracle
                    .iter()
                    .filter(|id| members.contains(id))
                    .position(|id| *id == target)
                    .unwrap(),
            );
            rankings.push(got);
            targets.push(target);
            subsets.push(subset);
        }
        for k in [1, 5, 10, 50] {
            let r = recall_at_k(&rankings, &targets, k).unwrap();
            if r != brute_recall(&positions, k) {
                mismatches.push(format!("instance {inst}: R@{k} {r}"));
            }
        }
        for k in [1, 2, 3] {
            let r = recall_subset_at_k(&rankings, &targets, &subsets, k).unwrap();
            if r != brute_recall(&subset_positions, k) {
                mismatches.push(format!("instance {inst}: Rs@{k} {r}"));
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        4,
        mismatches.is_empty() && elapsed < 5.0,
        &format!(
            "50 instances x {queries_per} queries, {tie_groups} tied rows, {} mismatches{}, {elapsed:.2} s",
            mismatches.len(),
            mismatches.first().map(|m| format!(" (first: {m})")).unwrap_or_default()
        ),
    );
}

#[derive(Deserialize)]
struct TextCase {
    id: String,
    caption: String,
    modification: String,
    expected: String,
}

fn random_image(rng: &mut ChaCha8Rng) -> RgbImage {
    let w = rng.random_range(96..400);
    let h = rng.random_range(96..400);
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

fn criterion_5_unification_exactness() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/unified_text_cases.json");
    let cases: Vec<TextCase> = serde_json::from_str(&std::fs::read_to_string(fixture).unwrap()).unwrap();
    let text_failures: Vec<&str> = cases
        .iter()
        .filter(|c| {
            let caption = Caption::new("img", &c.caption, CaptionSource::Fixture).unwrap();
            let q = build_unified_textual_query(&c.id, &caption, &c.modification).unwrap();
            q.text.as_bytes() != c.expected.as_bytes()
        })
        .map(|c| c.id.as_str())
        .collect();

    let vocabulary = ["red", "blue", "navy", "checked", "long", "sleeveless", "gold", "zip", "v-neck"];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let style = RenderStyle::default();
    let mut render_failures = Vec::new();
    for i in 0..20 {
        let image = random_image(&mut rng);
        let count = rng.random_range(1..4);
        let words: Vec<String> = vocabulary
            .sample(&mut rng, count)
            .map(|w| w.to_string())
            .collect();
        let q = render_keywords_on_image("r", &image, &words, &style).unwrap();
        let band = q.text_band;
        let mut changed = 0usize;
        let mut outside = 0usize;
        if q.image.dimensions() != image.dimensions() {
            render_failures.push(format!("image {i}: dimensions changed"));
            continue;
        }
        for (x, y, p) in image.enumerate_pixels() {
            if q.image.get_pixel(x, y) != p {
                changed += 1;
                if !band.contains(x, y) {
                    outside += 1;
                }
            }
        }
        if changed == 0 || outside > 0 || band.x + band.width > image.width() || band.y + band.height > image.height()
        {
            render_failures.push(format!("image {i}: {changed} changed, {outside} outside band {band:?}"));
        }
        let noop = render_keywords_on_image("r", &image, &[], &style).unwrap();
        if noop.image.as_raw() != image.as_raw() {
            render_failures.push(format!("image {i}: empty keywords changed pixels"));
        }
    }
    report(
        5,
        cases.len() == 50 && text_failures.is_empty() && render_failures.is_empty(),
        &format!(
            "{} template cases, {} mismatches; 20 renders, {} failures{}",
            cases.len(),
            text_failures.len(),
            render_failures.len(),
            render_failures.first().map(|m| format!(" (first: {m})")).unwrap_or_default()
        ),
    );
}

fn overfit_config(epochs: usize, checkpoint_dir: Option<&Path>) -> TrainConfig {
    TrainConfig {
        lr_backbone: 1e-3,
        lr_head: 1e-3,
        batch_size: 16,
        tau: 0.1,
        epochs,
        seed: 0,
        checkpoint_dir: checkpoint_dir.map(Path::to_path_buf),
        ..TrainConfig::default()
    }
}

fn criterion_6_toy_overfit() {
    let dir = tempfile::tempdir().unwrap();
    let prep = common::prepare_synthetic(dir.path(), CacheMode::Record);
    let start = Instant::now();
    let data = TrainingSet::load(&prep.queries, &prep.resolver, 1).unwrap();
    let mut model = CirModel::new(&BackendConfig::default(), None, 0, false).unwrap();
    let outcome = train(&mut model, &data, &overfit_config(200, None), None).unwrap();
    let protocol = EvalProtocol::standard(ProtocolName::Shoes);
    let metrics = evaluate(&protocol, AblationMode::Full, &model, &prep.queries, &prep.resolver, None).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let loss = outcome.epochs.last().unwrap().mean_loss;
    let r1 = metrics.get("R@1").unwrap();
    report(
        6,
        prep.queries.len() == 32 && r1 >= 95.0 && loss < 0.05 && elapsed < 60.0,
        &format!(
            "{} triplets, final loss {loss:.6}, training R@1 {r1:.2}%, {elapsed:.2} s",
            prep.queries.len()
        ),
    );
}

fn cache_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn copy_tree(from: &Path, to: &Path) {
    for (rel, bytes) in cache_files(from) {
        let dest = to.join(rel);
        std::fs::create_dir_all(dest.parent().unwrap()).unwrap();
        std::fs::write(dest, bytes).unwrap();
    }
}

struct RunArtifacts {
    cache: Vec<(String, Vec<u8>)>,
    loss_log: Vec<u8>,
    report: Vec<u8>,
    new_writes: usize,
}

fn replay_run(recorded: &Path, run_dir: &Path) -> RunArtifacts {
    copy_tree(&recorded.join("cache"), &run_dir.join("cache"));
    let prep = common::prepare_synthetic(run_dir, CacheMode::Replay);
    let data = TrainingSet::load(&prep.queries, &prep.resolver, 2).unwrap();
    let mut model = CirModel::new(&BackendConfig::default(), None, 0, false).unwrap();
    let ckpt = run_dir.join("checkpoint");
    train(&mut model, &data, &overfit_config(30, Some(&ckpt)), None).unwrap();
    let protocol = EvalProtocol::standard(ProtocolName::Shoes);
    let metrics = evaluate(&protocol, AblationMode::Full, &model, &prep.queries, &prep.resolver, None).unwrap();
    RunArtifacts {
        cache: cache_files(&run_dir.join("cache")),
        loss_log: std::fs::read(ckpt.join(LOSS_LOG)).unwrap(),
        report: serde_json::to_vec_pretty(&metrics).unwrap(),
        new_writes: prep.summary.new_writes(),
    }
}

fn criterion_7_determinism() {
    let root = tempfile::tempdir().unwrap();
    let recorded = root.path().join("recorded");
    common::prepare_synthetic(&recorded, CacheMode::Record);
    let a = replay_run(&recorded, &root.path().join("a"));
    let b = replay_run(&recorded, &root.path().join("b"));
    let recorded_cache = cache_files(&recorded.join("cache"));
    let caches = a.cache == b.cache && a.cache == recorded_cache;
    let logs = a.loss_log == b.loss_log && !a.loss_log.is_empty();
    let reports = a.report == b.report;
    report(
        7,
        caches && logs && reports && a.new_writes == 0 && b.new_writes == 0,
        &format!(
            "{} cache files identical: {caches}, loss logs identical: {logs}, reports identical: {reports}, \
             replay writes {} and {}",
            a.cache.len(),
            a.new_writes,
            b.new_writes
        ),
    );
}
