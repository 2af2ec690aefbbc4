use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cirkit::adapters::{self, AdapterOptions};
use cirkit::clients::cache::CacheDir;
use cirkit::clients::get_caption_cached;
use cirkit::clients::services::{default_captioners, http_text_service, CaptionService, CaptionerContext};
use cirkit::config::RunConfig;
use cirkit::datamodel::{
    build_candidate_set, load_gallery, load_manifest, save_manifest, ImageResolver, TripletRecord,
};
use cirkit::encoders::load_image;
use cirkit::eval::{
    build_index, evaluate_detailed, rank_scored, summarize_seeds, AblationMode, EmbeddingIndex, EvalOptions,
    MetricsReport,
};
use cirkit::fsutil::{self, write_atomic};
use cirkit::model::{CirModel, QueryInputs};
use cirkit::pipeline::{extract_keywords_with_fallback, load_prepared, run_preprocess, PreprocessOptions};
use cirkit::synthetic::{generate, SyntheticSpec};
use cirkit::trainer::{load_checkpoint, train, TrainConfig, TrainingSet, Validation, CHECKPOINT_FILE};
use cirkit::unify::keywords::{self as kw, ExtractorContext, KeywordExtractor};
use cirkit::unify::{render_with_truncation, unify_text};
use cirkit::{Error, Result};

use crate::{Command, GlobalArgs};

pub fn run(global: &GlobalArgs, command: Command) -> Result<()> {
    if let Command::Synth { out } = &command {
        return synth(out);
    }
    let cfg = load_config(global)?;
    match command {
        Command::Synth { .. } => unreachable!(),
        Command::Convert { adapter, input, output } => convert(&cfg, adapter, input, &output),
        Command::Preprocess => preprocess(&cfg),
        Command::Train => train_all(&cfg),
        Command::Evaluate {
            mode,
            all_modes,
            checkpoint,
        } => {
            let modes = if all_modes {
                AblationMode::ALL.to_vec()
            } else {
                vec![mode.map_or(Ok(cfg.eval.mode), |m| m.parse())?]
            };
            evaluate_all(&cfg, &modes, checkpoint.as_deref())
        }
        Command::Retrieve {
            reference,
            text,
            top_k,
            checkpoint,
            index,
        } => retrieve(
            &cfg,
            &reference,
            &text,
            top_k.unwrap_or(cfg.eval.top_k),
            checkpoint.as_deref(),
            index.as_deref(),
        ),
        Command::ExportIndex { out, checkpoint } => export_index(&cfg, &out, checkpoint.as_deref()),
    }
}

fn load_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(global.config.as_deref(), &global.overrides)?;
    if let Some(seed) = global.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(jobs) = global.jobs {
        cfg.jobs = jobs;
    }
    if global.normalize_features {
        cfg.normalize_features = true;
    }
    if let Some(join) = &global.caption_join {
        cfg.data.caption_join = join.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth(out: &Path) -> Result<()> {
    let ds = generate(&out.join("data"), &SyntheticSpec::default())?;
    let mut cfg = RunConfig::default();
    cfg.data.manifest = Some("data/manifest.jsonl".into());
    cfg.data.image_root = "data/images".into();
    cfg.preprocess.captions_fixture = Some("data/captions.json".into());
    cfg.train.lr_backbone = 1e-3;
    cfg.train.lr_head = 1e-3;
    cfg.train.epochs = 200;
    let path = out.join("run.toml");
    write_atomic(&path, cfg.to_toml()?.as_bytes())?;
    println!("wrote {} triplets and {}", ds.records.len(), path.display());
    Ok(())
}

fn convert(cfg: &RunConfig, adapter: Option<String>, input: Option<PathBuf>, output: &Path) -> Result<()> {
    let name = adapter.unwrap_or_else(|| cfg.data.adapter.clone());
    let input = input
        .or_else(|| cfg.data.raw_annotations.clone())
        .ok_or_else(|| Error::Config("convert needs --input or data.raw_annotations".into()))?;
    let opts = AdapterOptions {
        caption_join: cfg.data.caption_join.clone(),
        category: cfg.data.category.clone(),
        ..AdapterOptions::default()
    };
    let records = adapters::default_registry().create(&name, &opts)?.convert(&input)?;
    save_manifest(output, &records)?;
    println!("{} triplets -> {}", records.len(), output.display());
    Ok(())
}

/// Training manifest records, plus validation ones when `with_val` is set,
/// deduplicated by triplet id.
fn load_records(cfg: &RunConfig, with_val: bool) -> Result<Vec<TripletRecord>> {
    let mut records = load_manifest(cfg.manifest()?)?;
    if let (true, Some(val)) = (with_val, &cfg.data.val_manifest) {
        let seen: std::collections::HashSet<String> = records.iter().map(|r| r.triplet_id.clone()).collect();
        records.extend(load_manifest(val)?.into_iter().filter(|r| !seen.contains(&r.triplet_id)));
    }
    Ok(records)
}

fn eval_records(cfg: &RunConfig) -> Result<Vec<TripletRecord>> {
    match &cfg.data.val_manifest {
        Some(v) => load_manifest(v),
        None => load_manifest(cfg.manifest()?),
    }
}

fn captioner(cfg: &RunConfig) -> Result<Box<dyn CaptionService>> {
    default_captioners().create(
        &cfg.preprocess.captioner,
        &CaptionerContext {
            endpoint: cfg.preprocess.caption_endpoint.clone(),
            fixture_path: cfg.preprocess.captions_fixture.clone(),
        },
    )
}

fn extractor(cfg: &RunConfig) -> Result<Box<dyn KeywordExtractor>> {
    let text_service = if cfg.preprocess.text_endpoint.base_url.is_empty() {
        None
    } else {
        Some(http_text_service(&cfg.preprocess.text_endpoint)?)
    };
    kw::default_registry().create(
        &cfg.preprocess.extractor,
        &ExtractorContext {
            text_service,
            fixture_path: cfg.preprocess.keywords_fixture.clone(),
        },
    )
}

fn cache_dir(cfg: &RunConfig) -> CacheDir {
    CacheDir::new(&cfg.data.cache_dir, cfg.data.cache_mode)
}

fn preprocess(cfg: &RunConfig) -> Result<()> {
    let records = load_records(cfg, true)?;
    let resolver = ImageResolver::from_records(&cfg.data.image_root, &records);
    let captioner = captioner(cfg)?;
    let extractor = extractor(cfg)?;
    let opts = PreprocessOptions {
        style: cfg.preprocess.style(),
        jobs: cfg.jobs,
        keyword_fallback: cfg.preprocess.keyword_fallback,
    };
    let summary = run_preprocess(&records, &resolver, &cache_dir(cfg), captioner.as_ref(), extractor.as_ref(), &opts)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn checkpoint_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    let base = cfg
        .train
        .checkpoint_dir
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("checkpoint"));
    if cfg.seeds.len() > 1 {
        base.join(format!("seed-{seed}"))
    } else {
        base
    }
}

fn seeded_train_config(cfg: &RunConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        checkpoint_dir: Some(checkpoint_dir(cfg, seed)),
        ..cfg.train.clone()
    }
}

fn train_all(cfg: &RunConfig) -> Result<()> {
    let records = load_manifest(cfg.manifest()?)?;
    let val_records = match &cfg.data.val_manifest {
        Some(v) => Some(load_manifest(v)?),
        None => None,
    };
    let mut all = records.clone();
    all.extend(val_records.iter().flatten().cloned());
    let resolver = ImageResolver::from_records(&cfg.data.image_root, &all);
    let cache = cache_dir(cfg);
    let prepared = load_prepared(&records, &resolver, &cache)?;
    let val_prepared = match &val_records {
        Some(v) => Some(load_prepared(v, &resolver, &cache)?),
        None => None,
    };
    let gallery = match &cfg.data.gallery {
        Some(g) => Some(load_gallery(g)?),
        None => None,
    };
    let protocol = cfg.protocol();
    let data = TrainingSet::load(&prepared, &resolver, cfg.jobs)?;

    for &seed in &cfg.seeds {
        let tc = seeded_train_config(cfg, seed);
        let backend = cirkit::encoders::BackendConfig {
            seed,
            ..cfg.backend.clone()
        };
        let mut model = CirModel::new(&backend, tc.hidden, seed, cfg.normalize_features)?;
        let validation = val_prepared.as_ref().map(|q| Validation {
            protocol: &protocol,
            queries: q,
            resolver: &resolver,
            gallery: gallery.as_deref(),
        });
        let out = train(&mut model, &data, &tc, validation.as_ref())?;
        let final_loss = out.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
        println!(
            "seed {seed}: {} epochs, final mean loss {final_loss:.6}, selected epoch {}, checkpoint {}",
            out.epochs.len(),
            out.selected_epoch,
            tc.checkpoint_dir.as_ref().unwrap().join(CHECKPOINT_FILE).display()
        );
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, explicit: Option<&Path>, seed: u64) -> Result<CirModel> {
    let path = explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint_dir(cfg, seed).join(CHECKPOINT_FILE));
    if !path.is_file() {
        return Err(Error::Config(format!(
            "checkpoint {} not found; run `train` first or pass --checkpoint",
            path.display()
        )));
    }
    load_checkpoint(&path, Some(cfg.backend.dim))?.to_model()
}

fn evaluate_all(cfg: &RunConfig, modes: &[AblationMode], checkpoint: Option<&Path>) -> Result<()> {
    let records = eval_records(cfg)?;
    let resolver = ImageResolver::from_records(&cfg.data.image_root, &records);
    let queries = load_prepared(&records, &resolver, &cache_dir(cfg))?;
    let gallery = match &cfg.data.gallery {
        Some(g) => Some(load_gallery(g)?),
        None => None,
    };
    let seeds: Vec<u64> = if checkpoint.is_some() {
        vec![cfg.seeds[0]]
    } else {
        cfg.seeds.clone()
    };
    let protocol = cfg.protocol();
    let opts = EvalOptions {
        chunk: cfg.eval.chunk,
        keep_top: cfg.eval.top_k,
    };
    let mut by_mode: BTreeMap<AblationMode, Vec<MetricsReport>> = BTreeMap::new();
    for &seed in &seeds {
        let model = load_model(cfg, checkpoint, seed)?;
        for &mode in modes {
            let (report, _) = evaluate_detailed(&protocol, mode, &model, &queries, &resolver, gallery.as_deref(), &opts)?;
            let name = if seeds.len() > 1 {
                format!("report-{mode}-seed-{seed}.json")
            } else {
                format!("report-{mode}.json")
            };
            write_json(&cfg.output_dir.join(name), &report)?;
            print!("{report}");
            by_mode.entry(mode).or_default().push(report);
        }
    }
    if seeds.len() > 1 {
        for (mode, reports) in &by_mode {
            let summary = summarize_seeds(&seeds, reports)?;
            write_json(&cfg.output_dir.join(format!("summary-{mode}.json")), &summary)?;
            print!("mode {mode} over {}", summary);
        }
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn candidate_index(cfg: &RunConfig, model: &CirModel) -> Result<EmbeddingIndex> {
    let records = load_records(cfg, true)?;
    let resolver = ImageResolver::from_records(&cfg.data.image_root, &records);
    let gallery = match &cfg.data.gallery {
        Some(g) => Some(load_gallery(g)?),
        None => None,
    };
    let candidates = build_candidate_set(&records, &cfg.protocol(), gallery.as_deref(), &resolver)?;
    build_index(model.backend.as_ref(), &candidates, cfg.eval.chunk)
}

fn export_index(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let model = load_model(cfg, checkpoint, cfg.seeds[0])?;
    let index = candidate_index(cfg, &model)?;
    let (m, ids) = index.save(out)?;
    println!("{} x {} -> {} and {}", index.len(), index.dim(), m.display(), ids.display());
    Ok(())
}

fn retrieve(
    cfg: &RunConfig,
    reference: &Path,
    text: &str,
    top_k: usize,
    checkpoint: Option<&Path>,
    index: Option<&Path>,
) -> Result<()> {
    if top_k == 0 {
        return Err(Error::Config("top_k must be >= 1".into()));
    }
    let model = load_model(cfg, checkpoint, cfg.seeds[0])?;
    let index = match index {
        Some(stem) => {
            let idx = EmbeddingIndex::load(stem)?;
            if idx.dim() != model.dim() {
                return Err(Error::Config(format!(
                    "index has D={} but the checkpoint has D={}",
                    idx.dim(),
                    model.dim()
                )));
            }
            idx
        }
        None => candidate_index(cfg, &model)?,
    };

    let bytes = fsutil::read(reference)?;
    let image_id = reference
        .file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty() && !s.contains(['\t', '\n', '\r']))
        .ok_or_else(|| Error::Validation(format!("cannot derive an image id from {}", reference.display())))?
        .to_string();
    let mut key_material = bytes.clone();
    key_material.extend_from_slice(text.as_bytes());
    let query_id = format!("query-{}", fsutil::content_hash(&key_material));

    let cache = cache_dir(cfg);
    let captions = cache.open_captions()?;
    let keywords_cache = cache.open_keywords()?;
    let caption = get_caption_cached(&image_id, &bytes, captioner(cfg)?.as_ref(), &captions)?;
    let (keywords, _) = extract_keywords_with_fallback(
        &query_id,
        text,
        extractor(cfg)?.as_ref(),
        &keywords_cache,
        cfg.preprocess.keyword_fallback,
    )?;
    let image = load_image(&image_id, reference)?;
    let unified = unify_text(&caption.text, text)?;
    let (visual, _) = render_with_truncation(&query_id, &image, &keywords.words, &cfg.preprocess.style())?;
    let query = model
        .query_vectors(
            cfg.eval.mode,
            &[QueryInputs {
                unified_text: &unified,
                visual: Some(&visual.image),
                caption: &caption.text,
                modification_text: text,
                reference: Some(&image),
            }],
        )?
        .remove(0);

    let ranking = rank_scored(&query.vector, &index, None)?;
    let mut out = String::new();
    out.push_str(&format!("query: {unified}\n"));
    out.push_str(&format!("keywords: {}\n", keywords.words.join(", ")));
    if let Some(l) = query.lambda {
        out.push_str(&format!("lambda: {l:.6}\n"));
    }
    for (rank, (id, score)) in ranking.iter().take(top_k).enumerate() {
        out.push_str(&format!("{}\t{id}\t{score:.6}\n", rank + 1));
    }
    print!("{out}");
    Ok(())
}
