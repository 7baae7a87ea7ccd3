//! Pipeline stages. Each reads its predecessors' artifacts, writes its own,
//! and returns a short human-readable summary.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use layercache::cache::{
    derive_seed, is_converged, retrain_cache, search as search_layer, train_cache, CacheArchitecture,
    CacheModel, SearchRow,
};
use layercache::calibration::{calibrate as calibrate_cache, ThresholdReport};
use layercache::engine::{evaluate as evaluate_model, CacheEnabledModel};
use layercache::fixtures::{accuracy, pretrain_backbone, toy_conv_backbone, ImageMixture};
use layercache::graph::{load_model, save_model, BackboneGraph, CandidateLayer};
use layercache::medial::{collect as collect_medial, split, MedialDataset, Split};
use layercache::samples::SampleSet;
use layercache::subset::{optimize as optimize_subsets, record_val_predictions, SubsetScore};
use layercache::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::artifacts::{check_hash, read_json, require, write_json, write_text, Artifacts};
use crate::config::PipelineConfig;
use crate::error::{ServiceError, ServiceResult};
use crate::maintenance::{check_retrain_trigger, MaintenanceState};
use crate::server::Server;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatesArtifact {
    pub backbone_hash: String,
    pub skip_last_k: usize,
    pub total_flops: u64,
    pub candidates: Vec<CandidateLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchArtifact {
    pub backbone_hash: String,
    pub layer: String,
    pub ordinal: usize,
    /// `None` when no architecture converged.
    pub selected: Option<CacheArchitecture>,
    pub rows: Vec<SearchRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub backbone_hash: String,
    pub report: ThresholdReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetsArtifact {
    pub backbone_hash: String,
    pub tolerance: f64,
    pub ordinals: Vec<usize>,
    pub best: Vec<usize>,
    pub best_score: i64,
    pub table: Vec<SubsetScore>,
}

struct Ctx {
    cfg: PipelineConfig,
    art: Artifacts,
    graph: BackboneGraph,
}

impl Ctx {
    fn open(cfg: &PipelineConfig) -> ServiceResult<Self> {
        cfg.validate()?;
        let graph = load_model(&cfg.paths.backbone)?;
        Ok(Self {
            cfg: cfg.clone(),
            art: Artifacts::new(&cfg.paths.artifacts),
            graph,
        })
    }

    fn hash(&self) -> &str {
        self.graph.content_hash()
    }

    fn candidates(&self, stage: &'static str) -> ServiceResult<Vec<CandidateLayer>> {
        let path = self.art.candidates();
        let a: CandidatesArtifact = read_json(&path, stage, "candidates")?;
        check_hash(&path, &a.backbone_hash, self.hash(), "candidates")?;
        Ok(a.candidates)
    }

    fn medial(&self, stage: &'static str, layer: &str) -> ServiceResult<MedialDataset> {
        let path = self.art.medial(layer);
        require(&path, stage, "collect")?;
        let md = MedialDataset::load(&path)?;
        check_hash(&path, &md.backbone_hash, self.hash(), "collect")?;
        if md.splits.is_none() {
            return Err(ServiceError::Precondition {
                stage,
                missing: format!("splits in {}", path.display()),
                run_first: "collect",
            });
        }
        Ok(md)
    }

    fn search_result(&self, stage: &'static str, layer: &str) -> ServiceResult<SearchArtifact> {
        let path = self.art.search(layer);
        let a: SearchArtifact = read_json(&path, stage, "search")?;
        check_hash(&path, &a.backbone_hash, self.hash(), "search")?;
        Ok(a)
    }

    /// Layers whose search selected an architecture, in candidate order.
    fn selected(&self, stage: &'static str) -> ServiceResult<Vec<(CandidateLayer, CacheArchitecture)>> {
        let mut out = Vec::new();
        for c in self.candidates(stage)? {
            if let Some(arch) = self.search_result(stage, &c.name)?.selected {
                out.push((c, arch));
            }
        }
        Ok(out)
    }

    fn trained_cache(&self, stage: &'static str, layer: &str) -> ServiceResult<CacheModel> {
        let path = self.art.cache(layer);
        require(&path, stage, "train-caches")?;
        let (cache, hash) = CacheModel::load(&path)?;
        check_hash(&path, &hash, self.hash(), "train-caches")?;
        Ok(cache)
    }

    /// Trained caches that passed the convergence check after full training.
    fn built_layers(&self, stage: &'static str) -> ServiceResult<Vec<CandidateLayer>> {
        let mut out = Vec::new();
        for (c, arch) in self.selected(stage)? {
            let cache = self.trained_cache(stage, &c.name)?;
            if cache.architecture != arch {
                return Err(ServiceError::Stale {
                    artifact: self.art.cache(&c.name).display().to_string(),
                    found: cache.architecture.describe(),
                    current: arch.describe(),
                    run_first: "train-caches",
                });
            }
            if is_converged(
                cache.metrics.val_accuracy,
                cache.num_classes,
                self.cfg.search.selection.convergence_margin,
            ) {
                out.push(c);
            }
        }
        Ok(out)
    }

    fn calibrated_cache(&self, stage: &'static str, layer: &str) -> ServiceResult<CacheModel> {
        let mut cache = self.trained_cache(stage, layer)?;
        let path = self.art.calibration(layer);
        let a: CalibrationArtifact = read_json(&path, stage, "calibrate")?;
        check_hash(&path, &a.backbone_hash, self.hash(), "calibrate")?;
        if a.report.tolerance != self.cfg.tolerance {
            return Err(ServiceError::Precondition {
                stage,
                missing: format!("calibration at tolerance {}", self.cfg.tolerance),
                run_first: "calibrate",
            });
        }
        cache.temperature = a.report.temperature;
        cache.threshold = a.report.threshold;
        Ok(cache)
    }

    fn maintenance(&self) -> ServiceResult<MaintenanceState> {
        Ok(MaintenanceState::load(&self.art.maintenance())?.unwrap_or(MaintenanceState {
            built_count: 0,
            current_count: 0,
            backbone_hash: self.hash().to_string(),
        }))
    }
}

pub fn candidates(cfg: &PipelineConfig) -> ServiceResult<String> {
    let ctx = Ctx::open(cfg)?;
    let candidates = ctx.graph.identify_candidates(cfg.skip_last_k);
    let mut text = format!(
        "{} candidate layers (backbone {} FLOPs)\n",
        candidates.len(),
        ctx.graph.total_flops()
    );
    for c in &candidates {
        text.push_str(&format!(
            "  {} {} {:?} cumulative {} fallback {}\n",
            c.ordinal, c.name, c.tap_shape, c.cumulative_flops, c.fallback_flops
        ));
    }
    write_json(
        &ctx.art.candidates(),
        &CandidatesArtifact {
            backbone_hash: ctx.hash().to_string(),
            skip_last_k: cfg.skip_last_k,
            total_flops: ctx.graph.total_flops(),
            candidates,
        },
    )?;
    Ok(text)
}

pub fn collect(cfg: &PipelineConfig) -> ServiceResult<String> {
    let ctx = Ctx::open(cfg)?;
    let candidates = ctx.candidates("collect")?;
    let data = SampleSet::load(&cfg.paths.data)?;
    let mds = collect_medial(&ctx.graph, &data.ids, &data.inputs, &candidates)?;
    let mut text = format!("collected {} samples at {} layers\n", data.len(), mds.len());
    for mut md in mds {
        split(&mut md, cfg.split.ratios, cfg.split.seed)?;
        let sizes = layercache::medial::split_sizes(&md);
        text.push_str(&format!("  {} {:?}\n", md.layer, sizes));
        md.save(&ctx.art.medial(&md.layer))?;
    }
    let mut state = ctx.maintenance()?;
    state.observe(data.len());
    write_json(&ctx.art.maintenance(), &state)?;
    Ok(text)
}

pub fn search(cfg: &PipelineConfig) -> ServiceResult<String> {
    let ctx = Ctx::open(cfg)?;
    let train_cfg = cfg.search_train();
    let mut text = String::new();
    for c in ctx.candidates("search")? {
        let md = ctx.medial("search", &c.name)?;
        let out = search_layer(&c, &md, &cfg.search.menus, &train_cfg, cfg.search.selection)?;
        let selected = out.selected.as_ref().map(|m| m.architecture.clone());
        text.push_str(&format!(
            "  {} {} architectures, selected {}\n",
            c.name,
            out.rows.len(),
            selected.as_ref().map_or("none".to_string(), |a| a.describe())
        ));
        write_json(
            &ctx.art.search(&c.name),
            &SearchArtifact {
                backbone_hash: ctx.hash().to_string(),
                layer: c.name.clone(),
                ordinal: c.ordinal,
                selected,
                rows: out.rows,
            },
        )?;
    }
    Ok(text)
}

/// Trains the selected architectures; `warm_start` continues from existing
/// weights of the same architecture instead of a fresh initialization.
pub fn train_caches(cfg: &PipelineConfig, warm_start: bool) -> ServiceResult<String> {
    let ctx = Ctx::open(cfg)?;
    let mut text = String::new();
    let selected = ctx.selected("train-caches")?;
    for c in ctx.candidates("train-caches")? {
        if !selected.iter().any(|(s, _)| s.name == c.name) {
            let stale = ctx.art.cache(&c.name);
            if stale.exists() {
                fs::remove_file(stale)?;
            }
        }
    }
    for (c, arch) in selected {
        let md = ctx.medial("train-caches", &c.name)?;
        let job = TrainConfig {
            seed: derive_seed(cfg.train.seed, c.ordinal as u64),
            ..cfg.train.clone()
        };
        let previous = if warm_start {
            ctx.trained_cache("train-caches", &c.name)
                .ok()
                .filter(|p| p.architecture == arch)
        } else {
            None
        };
        let cache = match &previous {
            Some(p) => retrain_cache(p, &md, &c, &job)?,
            None => train_cache(&arch, &md, &c, &job)?,
        };
        let converged = is_converged(
            cache.metrics.val_accuracy,
            cache.num_classes,
            cfg.search.selection.convergence_margin,
        );
        text.push_str(&format!(
            "  {} {} val accuracy {:.4} after {} epochs{}{}\n",
            c.name,
            arch.describe(),
            cache.metrics.val_accuracy,
            cache.metrics.epochs_run,
            if previous.is_some() { " (warm start)" } else { "" },
            if converged { "" } else { ", not converged: discarded" }
        ));
        cache.save(&ctx.art.cache(&c.name), ctx.hash())?;
    }
    let mut state = ctx.maintenance()?;
    state.mark_built(ctx.hash());
    write_json(&ctx.art.maintenance(), &state)?;
    Ok(text)
}

pub fn calibrate(cfg: &PipelineConfig) -> ServiceResult<String> {
    let ctx = Ctx::open(cfg)?;
    let mut text = String::new();
    for c in ctx.built_layers("calibrate")? {
        let mut cache = ctx.trained_cache("calibrate", &c.name)?;
        let md = ctx.medial("calibrate", &c.name)?;
        let report = calibrate_cache(&mut cache, &md, cfg.tolerance)?;
        text.push_str(&format!(
            "  {} temperature {:.4} ece {:.4} -> {:.4} threshold {:?} budget {:.6}\n",
            c.name, report.temperature, report.ece_before, report.ece_after, report.threshold, report.budget
        ));
        write_json(
            &ctx.art.calibration(&c.name),
            &CalibrationArtifact {
                backbone_hash: ctx.hash().to_string(),
                report,
            },
        )?;
    }
    Ok(text)
}

pub fn optimize(cfg: &PipelineConfig) -> ServiceResult<String> {
    let ctx = Ctx::open(cfg)?;
    let mut caches = Vec::new();
    let mut mds = Vec::new();
    for c in ctx.built_layers("optimize")? {
        caches.push(ctx.calibrated_cache("optimize", &c.name)?);
        mds.push(ctx.medial("optimize", &c.name)?);
    }
    let record = record_val_predictions(&caches, &mds)?;
    let out = optimize_subsets(&record)?;
    write_json(&ctx.art.val_record(), &record)?;
    let text = format!(
        "scored {} subsets of {} caches; best {:?} saves {} FLOPs on {} validation samples\n",
        out.table.len(),
        caches.len(),
        out.best,
        out.best_score,
        record.ids.len()
    );
    write_json(
        &ctx.art.subsets(),
        &SubsetsArtifact {
            backbone_hash: ctx.hash().to_string(),
            tolerance: cfg.tolerance,
            ordinals: record.ordinals(),
            best: out.best,
            best_score: out.best_score,
            table: out.table,
        },
    )?;
    Ok(text)
}

/// The backbone with the optimized cache subset enabled.
pub fn load_cache_enabled(cfg: &PipelineConfig) -> ServiceResult<CacheEnabledModel> {
    let ctx = Ctx::open(cfg)?;
    build_model(&ctx, "evaluate")
}

fn build_model(ctx: &Ctx, stage: &'static str) -> ServiceResult<CacheEnabledModel> {
    let path = ctx.art.subsets();
    let subsets: SubsetsArtifact = read_json(&path, stage, "optimize")?;
    check_hash(&path, &subsets.backbone_hash, ctx.hash(), "optimize")?;
    let mut caches = Vec::new();
    for c in ctx.candidates(stage)? {
        if subsets.best.contains(&c.ordinal) {
            caches.push(ctx.calibrated_cache(stage, &c.name)?);
        }
    }
    Ok(CacheEnabledModel::new(ctx.graph.clone(), caches, subsets.tolerance)?)
}

fn test_samples(ctx: &Ctx) -> ServiceResult<SampleSet> {
    if let Some(path) = &ctx.cfg.paths.test_data {
        return Ok(SampleSet::load(path)?);
    }
    let data = SampleSet::load(&ctx.cfg.paths.data)?;
    if data.labels.is_none() {
        return Err(ServiceError::Config(
            "evaluation needs labels: set paths.test_data or pass --test-data".into(),
        ));
    }
    let first = ctx
        .candidates("evaluate")?
        .into_iter()
        .next()
        .ok_or_else(|| ServiceError::Config("no candidate layers".into()))?;
    let md = ctx.medial("evaluate", &first.name)?;
    let test_ids = md.split_ids(Split::Test)?;
    let index: std::collections::HashMap<&str, usize> =
        data.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let rows: Vec<usize> = test_ids
        .iter()
        .map(|id| {
            index.get(id.as_str()).copied().ok_or_else(|| {
                ServiceError::Config(format!("test sample `{id}` is missing from {}", ctx.cfg.paths.data.display()))
            })
        })
        .collect::<ServiceResult<_>>()?;
    Ok(data.select(&rows))
}

pub fn evaluate(cfg: &PipelineConfig) -> ServiceResult<String> {
    let ctx = Ctx::open(cfg)?;
    let model = build_model(&ctx, "evaluate")?;
    let samples = test_samples(&ctx)?;
    let report = evaluate_model(&model, &samples, cfg.evaluation)?;
    write_json(&ctx.art.evaluation_json(), &report)?;
    let text = report.to_text();
    write_text(&ctx.art.evaluation_text(), &text)?;
    Ok(text)
}

fn status(ctx: &Ctx) -> ServiceResult<serde_json::Value> {
    let state = ctx.maintenance()?;
    let trigger = check_retrain_trigger(&state, ctx.hash(), ctx.cfg.maintenance.drift_fraction);
    let subsets: Option<SubsetsArtifact> = read_json(&ctx.art.subsets(), "report", "optimize").ok();
    Ok(serde_json::json!({
        "backbone_hash": ctx.hash(),
        "backbone_flops": ctx.graph.total_flops(),
        "enabled_caches": subsets.as_ref().map(|s| s.best.clone()),
        "tolerance": ctx.cfg.tolerance,
        "maintenance": state,
        "trigger": trigger,
    }))
}

pub fn serve(cfg: &PipelineConfig) -> ServiceResult<String> {
    let ctx = Ctx::open(cfg)?;
    let model = Arc::new(build_model(&ctx, "serve")?);
    let report = status(&ctx)?;
    let server = Server::bind(
        (cfg.serve.host.as_str(), cfg.serve.port),
        model,
        report,
        cfg.serve.max_frame_bytes,
    )?;
    log::info!("listening on {}", server.local_addr()?);
    server.run()?;
    Ok(String::new())
}

pub fn report(cfg: &PipelineConfig) -> ServiceResult<String> {
    let ctx = Ctx::open(cfg)?;
    let mut text = serde_json::to_string_pretty(&status(&ctx)?).expect("json");
    text.push('\n');
    if ctx.art.evaluation_text().exists() {
        text.push_str(&fs::read_to_string(ctx.art.evaluation_text())?);
    }
    Ok(text)
}

/// Sizes for [`toy`].
#[derive(Debug, Clone, Copy)]
pub struct ToySizes {
    pub pretrain: usize,
    pub traffic: usize,
    pub test: usize,
}

impl Default for ToySizes {
    fn default() -> Self {
        Self {
            pretrain: 2500,
            traffic: 2000,
            test: 1000,
        }
    }
}

/// Writes a pretrained toy backbone, labeled traffic and test sets, and a
/// config file referencing them into `dir`. Returns the config path.
pub fn toy(dir: &Path, sizes: ToySizes, seed: u64) -> ServiceResult<(std::path::PathBuf, String)> {
    let mix = ImageMixture::default();
    let pretrain = mix.generate(sizes.pretrain, derive_seed(seed, 1))?;
    let traffic = mix.generate(sizes.traffic, derive_seed(seed, 2))?;
    let test = mix.generate(sizes.test, derive_seed(seed, 3))?;
    let n_val = sizes.pretrain / 5;
    let (val_rows, train_rows): (Vec<usize>, Vec<usize>) = (0..sizes.pretrain).partition(|&i| i < n_val);
    let cfg_train = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 32,
        max_epochs: 15,
        patience: 3,
        seed,
        ..TrainConfig::default()
    };
    let untrained = toy_conv_backbone(mix.channels, mix.classes, seed)?;
    let graph = pretrain_backbone(
        &untrained,
        &pretrain.select(&train_rows),
        Some(&pretrain.select(&val_rows)),
        &cfg_train,
    )?;
    let acc = accuracy(&graph, &test)?;
    save_model(&graph, &dir.join("backbone").join("manifest.toml"))?;
    traffic.save(&dir.join("data").join("traffic.bin"))?;
    test.save(&dir.join("data").join("test.bin"))?;
    let mut cfg = PipelineConfig::default();
    cfg.paths.test_data = Some("data/test.bin".into());
    cfg.train = TrainConfig {
        learning_rate: 3e-3,
        max_epochs: 20,
        ..TrainConfig::default()
    };
    let path = dir.join("layercache.toml");
    write_text(&path, &cfg.to_toml())?;
    Ok((
        path,
        format!("toy backbone test accuracy {acc:.4} ({} FLOPs per sample)\n", graph.total_flops()),
    ))
}
