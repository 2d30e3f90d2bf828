use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};
use ssr_core::config::ExperimentConfig;
use ssr_core::datasets::{
    build_split, list_images, synthetic, SourceLayout, SplitConfig, SplitManifest, TrainingData,
};
use ssr_core::imaging::{load_image, save_png, DegradationSpec, Kernel, ValueRange};
use ssr_core::metrics::{mos_table, read_ratings, FidConfig, FidExtractor};
use ssr_core::study::{export_study, BlindingKey, StudyImage, StudyMethod, StudyService};
use ssr_core::trainer::{fit, infer, load_generator, resolve_checkpoint, Tiling};
use ssr_core::{DType, Device, Error, Result};

use crate::{
    ExportStudyArgs, FidArgs, InferArgs, MosArgs, ServeStudyArgs, SplitArgs, TrainArgs,
};

/// Name of the resolved configuration written into every training run directory.
pub const CONFIG_ECHO: &str = "config.toml";

pub fn error_record(e: &Error) -> Value {
    json!({ "error": { "kind": e.kind(), "message": e.to_string() } })
}

fn parse_kernel(s: &str) -> Result<Kernel> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown kernel {s:?}; use bicubic, average-pool or nearest")))
}

pub fn split(a: &SplitArgs) -> Result<Value> {
    let layout = match (&a.src, &a.hr) {
        (Some(src), _) => SourceLayout::discover(src),
        (None, Some(hr)) => SourceLayout {
            hr_dir: hr.clone(),
            lr_dir: a.lr.clone(),
        },
        (None, None) => return Err(Error::Config("give --src or --hr".into())),
    };
    let cfg = SplitConfig {
        n_paired: a.paired,
        n_unpaired: a.unpaired,
        n_test: a.test,
        seed: a.seed,
        hr_size: a.hr_size,
    };
    let spec = DegradationSpec::new(a.scale, parse_kernel(&a.kernel)?);
    let m = build_split(&layout, &a.out, &cfg, &spec)?;
    Ok(json!({
        "manifest": a.out.join(ssr_core::datasets::MANIFEST_FILE),
        "seed": m.header.seed,
        "paired": m.paired.len(),
        "unpaired": m.unpaired.len(),
        "test": m.test.len(),
        "hr_size": m.header.hr_size,
        "lr_size": m.header.lr_size,
    }))
}

/// File values, then flag overrides; the result is validated again.
pub fn resolve_train_config(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(&a.config)?;
    let t = &mut cfg.trainer;
    if let Some(v) = &a.out {
        t.out_dir = v.clone();
    }
    if let Some(v) = a.max_batches {
        t.max_batches = v;
    }
    if let Some(v) = a.warmup_batches {
        t.warmup_batches = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.lr_init {
        t.lr_init = v;
    }
    if let Some(v) = a.workers {
        t.workers = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = a.validate_every {
        t.validate_every = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn training_data(cfg: &ExperimentConfig) -> Result<TrainingData> {
    match (&cfg.data.manifest, &cfg.data.synthetic) {
        (Some(m), _) => {
            let m = SplitManifest::read(m)?;
            if m.header.degradation() != cfg.degradation {
                log::warn!(
                    "manifest was prepared with {:?}, config uses {:?}",
                    m.header.degradation(),
                    cfg.degradation
                );
            }
            TrainingData::from_manifest(&m)
        }
        (None, Some(s)) => {
            let hr = synthetic::shapes(s.n_paired + s.n_unpaired + s.n_validation, s.hr_size, s.channels, s.seed);
            let (paired, rest) = hr.split_at(s.n_paired);
            let (unpaired, validation) = rest.split_at(s.n_unpaired);
            TrainingData::synthesize(paired, unpaired, validation, &cfg.degradation)
        }
        (None, None) => Err(Error::Config(
            "no training data: set data.manifest or data.synthetic".into(),
        )),
    }
}

pub fn train(a: &TrainArgs) -> Result<Value> {
    let cfg = resolve_train_config(a)?;
    let out = cfg.trainer.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let echo = out.join(CONFIG_ECHO);
    std::fs::write(&echo, cfg.to_toml_string()?).map_err(|e| Error::io(&echo, e))?;
    log::info!("seed {}; resolved config written to {}", cfg.trainer.seed, echo.display());
    let data = Arc::new(training_data(&cfg)?);
    let resume = a.resume.as_deref().map(resolve_checkpoint);
    let res = fit(&cfg, data, &out, resume.as_deref(), &Device::Cpu)?;
    Ok(json!({
        "out_dir": out,
        "config": echo,
        "seed": cfg.trainer.seed,
        "batches": res.trainer.state.batch_idx,
        "stage": res.trainer.stage(),
        "stopped_early": res.stopped_early,
        "final_checkpoint": res.final_checkpoint,
        "last": res.last,
        "validation": res.validations.last(),
    }))
}

fn tiling(tile: Option<usize>, overlap: usize) -> Option<Tiling> {
    tile.map(|tile| Tiling { tile, overlap })
}

pub fn infer_cmd(a: &InferArgs) -> Result<Value> {
    let g = load_generator(&resolve_checkpoint(&a.ckpt), DType::F32, &Device::Cpu)?;
    let jobs: Vec<(PathBuf, PathBuf)> = if a.input.is_dir() {
        std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
        list_images(&a.input)?
            .into_iter()
            .map(|p| {
                let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                let out = a.out.join(format!("{name}.png"));
                (p, out)
            })
            .collect()
    } else {
        vec![(a.input.clone(), a.out.clone())]
    };
    let mut outputs = Vec::with_capacity(jobs.len());
    for (src, dst) in jobs {
        let lr = load_image(&src, ValueRange::Unit)?;
        let sr = infer(&g, &lr, tiling(a.tile, a.overlap))?;
        if let Some(dir) = dst.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_png(&sr, &dst)?;
        let (h, w, c) = sr.shape();
        outputs.push(json!({ "input": src, "output": dst, "height": h, "width": w, "channels": c }));
    }
    Ok(json!({ "outputs": outputs }))
}

pub fn fid(a: &FidArgs) -> Result<Value> {
    let cfg = if a.small {
        FidConfig::small()
    } else {
        let mut c = FidConfig::default();
        c.features.weights = a.weights.clone();
        c
    };
    let ex = FidExtractor::new(&cfg, &Device::Cpu)?;
    Ok(serde_json::to_value(ex.fid_dirs(&a.real, &a.fake, a.n_max)?)?)
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

pub fn mos(a: &MosArgs) -> Result<Value> {
    let records = read_ratings(&a.ratings)?;
    let key = a.key.as_deref().map(BlindingKey::read).transpose()?;
    let rows: Vec<Value> = mos_table(&records)?
        .into_iter()
        .map(|s| {
            let mut row = json!({
                "method_id": s.method_id,
                "mean": round3(s.mean),
                "std": round3(s.std),
                "count": s.count,
            });
            if let Some(k) = &key {
                row["name"] = json!(k.name_of(&s.method_id));
            }
            row
        })
        .collect();
    Ok(json!({ "ratings": records.len(), "methods": rows }))
}

fn parse_method(s: &str) -> StudyMethod {
    match s.split_once('=') {
        Some((name, path)) => StudyMethod {
            name: name.to_string(),
            checkpoint: resolve_checkpoint(Path::new(path)),
        },
        None => {
            let checkpoint = resolve_checkpoint(Path::new(s));
            let name = Path::new(s)
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            StudyMethod { name, checkpoint }
        }
    }
}

pub fn export_study_cmd(a: &ExportStudyArgs) -> Result<Value> {
    let methods: Vec<StudyMethod> = a.ckpts.iter().map(|s| parse_method(s)).collect();
    let m = SplitManifest::read(&a.manifest)?;
    let images = m
        .test
        .iter()
        .take(a.n_images)
        .map(|e| {
            Ok(StudyImage {
                image_id: e.id.clone(),
                lr: load_image(&m.resolve(&e.lr), ValueRange::Unit)?,
                hr: load_image(&m.resolve(&e.hr), ValueRange::Unit)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = export_study(&methods, &images, &a.out, a.seed, tiling(a.tile, a.overlap))?;
    let mut v = serde_json::to_value(summary)?;
    v["bundle"] = json!(a.out);
    Ok(v)
}

pub fn serve_study(a: &ServeStudyArgs) -> Result<Value> {
    let svc = Arc::new(StudyService::open(&a.bundle, &a.ratings)?);
    let app = crate::server::router(svc.clone(), a.ui.clone());
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io(&a.bundle, e))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| Error::Config(format!("cannot bind {}: {e}", a.addr)))?;
        let addr = listener.local_addr().map_err(|e| Error::io(&a.bundle, e))?;
        println!("{}", json!({ "listening": addr.to_string(), "items": svc.total() }));
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::io(&a.ratings, e))
    })?;
    Ok(json!({ "stopped": true, "sessions": svc.progress().len() }))
}
