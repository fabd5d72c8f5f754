//! Experiment orchestration: config, the staged pipeline, retraining and
//! report emission. Every stage reads only files written by earlier
//! stages, so a run can restart at any stage.

use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::autograd::{argmax_rows, softmax_cross_entropy, Checkpoint, Gradients, Mode, Sgd, SgdConfig, Tape};
use crate::concentration::ConcentrationReport;
use crate::data::{load_idx, Augment, Dataset, DatasetStream, SyntheticSpec};
use crate::error::{Error, Result};
use crate::init::InitSpec;
use crate::rng::child_rng;
use crate::search::{
    compute_scores, evolutionary_topk, exhaustive_topk, Constraint, CostTable, EvolutionConfig, RankedSubnets,
    ScoreTable, Strategy, EXHAUSTIVE_LIMIT,
};
use crate::supernet::{
    train_indicators, BlockTemplate, LayerSlot, PathSample, SearchSpace, Supernet, TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SpaceConfig {
    /// Eight layers `NNRNNRNN`, width 32, four candidates.
    Desk,
    /// One layer per character of `pattern` (`N` normal, `R` reduction).
    /// Candidate strides are set per layer.
    Uniform {
        pattern: String,
        candidates: Vec<BlockTemplate>,
        channels: usize,
    },
    Explicit { layers: Vec<LayerSlot> },
}

impl SpaceConfig {
    pub fn build(&self, input_channels: usize, image_size: usize, classes: usize) -> Result<SearchSpace> {
        let s = match self {
            SpaceConfig::Desk => SearchSpace::desk_default(input_channels, image_size, classes)?,
            SpaceConfig::Uniform {
                pattern,
                candidates,
                channels,
            } => SearchSpace::uniform(pattern, candidates, *channels, input_channels, image_size, classes)?,
            SpaceConfig::Explicit { layers } => SearchSpace {
                input_channels,
                image_size,
                classes,
                layers: layers.clone(),
            },
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Idx {
        images: PathBuf,
        labels: PathBuf,
        classes: usize,
        /// Keep only the first `limit` samples.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(s) => s.generate(),
            DataSource::Idx {
                images,
                labels,
                classes,
                limit,
            } => {
                let d = load_idx(images, labels, *classes)?;
                Ok(match limit {
                    Some(n) if *n < d.len() => d.subset(&(0..*n).collect::<Vec<_>>()),
                    _ => d,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// Number of ranked subnets kept and retrained.
    pub k: usize,
    /// `None` enumerates when the space has at most 10⁶ subnets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default)]
    pub constraint: Constraint,
    #[serde(default)]
    pub evolution: EvolutionConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            k: 3,
            strategy: None,
            constraint: Constraint::none(),
            evolution: EvolutionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "retrain_sgd")]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augment: Augment,
}

fn retrain_sgd() -> SgdConfig {
    SgdConfig {
        lr: 0.05,
        ..SgdConfig::default()
    }
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            epochs: 5,
            batch_size: 32,
            sgd: retrain_sgd(),
            seed: 0,
            augment: Augment::default(),
        }
    }
}

fn default_validation_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    pub data: DataSource,
    pub space: SpaceConfig,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub retrain: RetrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if self.search.k == 0 {
            return Err(Error::Config("search.k must be positive".into()));
        }
        if self.train.batch_size < 2 || self.retrain.batch_size < 2 {
            return Err(Error::Config("batch sizes must be at least 2".into()));
        }
        self.init.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces every run seed (init, sampling, retraining) with `seed`.
    /// The dataset keeps its own seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.init.seed = seed;
        self.train.seed = seed;
        self.retrain.seed = seed;
        self
    }

    /// Loads the dataset and splits off the validation part.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let all = self.data.load()?;
        Ok(all.split(self.validation_fraction, self.seed))
    }

    pub fn search_space(&self, data: &Dataset) -> Result<SearchSpace> {
        let d = data.sample_dims();
        if d.height != d.width {
            return Err(Error::Config(format!("images must be square, got {}x{}", d.height, d.width)));
        }
        self.space.build(d.channels, d.height, data.classes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Train,
    Score,
    Search,
    Retrain,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Init,
        Stage::Train,
        Stage::Score,
        Stage::Search,
        Stage::Retrain,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Train => "train",
            Stage::Score => "score",
            Stage::Search => "search",
            Stage::Retrain => "retrain",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const MANIFEST: &str = "manifest.json";
pub const SUPERNET_SIDECAR: &str = "supernet.json";
pub const SUPERNET_INIT: &str = "supernet.init.ckpt";
pub const SUPERNET_TRAINED: &str = "supernet.ckpt";
pub const METRICS: &str = "metrics.jsonl";
pub const TRAIN_SUMMARY: &str = "train_summary.json";
pub const SCORES_JSON: &str = "scores.json";
pub const SCORES_CSV: &str = "scores.csv";
pub const RANKED: &str = "ranked.jsonl";
pub const RETRAIN_DIR: &str = "retrain";
pub const RETRAIN_RESULTS: &str = "retrain.jsonl";
pub const ISOMETRY_CSV: &str = "isometry.csv";
pub const CONCENTRATION_JSON: &str = "concentration.json";
pub const REPORTS_DIR: &str = "reports";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub space_size: u64,
    pub stages: Vec<String>,
    pub artifacts: Vec<String>,
}

impl Manifest {
    fn load_or_default(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST);
        if p.exists() {
            Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
        } else {
            Ok(Manifest::default())
        }
    }

    fn record(&mut self, stage: Stage, artifacts: &[&str]) {
        if !self.stages.iter().any(|s| s == stage.name()) {
            self.stages.push(stage.name().to_string());
        }
        for a in artifacts {
            if !self.artifacts.iter().any(|x| x == a) {
                self.artifacts.push(a.to_string());
            }
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Space and init spec, enough to rebuild the supernet's frozen weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupernetSidecar {
    pub space: SearchSpace,
    pub init: InitSpec,
}

pub fn save_supernet(net: &Supernet, dir: &Path, ckpt_name: &str) -> Result<()> {
    let side = SupernetSidecar {
        space: net.space.clone(),
        init: net.init.clone(),
    };
    fs::write(dir.join(SUPERNET_SIDECAR), serde_json::to_string_pretty(&side)? + "\n")?;
    Checkpoint::from_store(&net.store).save(&dir.join(ckpt_name))
}

pub fn load_supernet(dir: &Path, ckpt_name: &str) -> Result<Supernet> {
    let side: SupernetSidecar = serde_json::from_str(&fs::read_to_string(dir.join(SUPERNET_SIDECAR))?)?;
    let mut net = Supernet::build(&side.space, &side.init)?;
    Checkpoint::load(&dir.join(ckpt_name))?.load_into(&mut net.store)?;
    Ok(net)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainResult {
    pub rank: usize,
    pub choices: Vec<usize>,
    pub score: f64,
    pub accuracy: f64,
}

pub struct RetrainOutcome {
    pub net: Supernet,
    pub accuracy: f64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Builds the subnet `choices` from its initialization, zeroes the
/// classifier, unfreezes everything and trains with full backprop.
pub fn retrain_subnet(
    space: &SearchSpace,
    init: &InitSpec,
    choices: &[usize],
    train: &Dataset,
    val: &Dataset,
    cfg: &RetrainConfig,
) -> Result<RetrainOutcome> {
    let mut net = Supernet::build_subnet(space, init, choices)?;
    net.zero_head();
    net.store.unfreeze_all();
    let path = PathSample::from_blocks(&vec![0; choices.len()]);
    let label = PathSample::from_blocks(choices).to_string();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    if cfg.epochs > 0 {
        let stream = DatasetStream::new(train, cfg.batch_size, cfg.seed, cfg.augment)?;
        let total = cfg.epochs * stream.batches_per_epoch();
        let mut sgd = Sgd::new(cfg.sgd.clone());
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            let mut sum = 0.0;
            let mut count = 0;
            for batch in stream.epoch(epoch as u64) {
                let diverged = |hint: String| Error::Diverged {
                    step,
                    path: label.clone(),
                    hint: format!("{hint}; lower the retrain learning rate"),
                };
                let mut tape = Tape::new(Mode::Train);
                let x = tape.input(batch.images);
                let logits = net.forward(&mut tape, &path, x).map_err(|e| match e {
                    Error::NumericOverflow { .. } => diverged(e.to_string()),
                    other => other,
                })?;
                let (loss, g) = softmax_cross_entropy(tape.value(logits), &batch.labels)?;
                if !loss.is_finite() {
                    return Err(diverged("loss is not finite".into()));
                }
                let grads: Gradients = tape.backward(&net.store, logits, &g)?;
                tape.commit_running_stats(&mut net.store);
                sgd.step(&mut net.store, &grads, cfg.sgd.lr_at(step, total));
                sum += loss;
                count += 1;
                step += 1;
            }
            epoch_losses.push(sum / count.max(1) as f64);
        }
    }
    let accuracy = accuracy(&net, &path, val, cfg.batch_size)?;
    Ok(RetrainOutcome {
        net,
        accuracy,
        epoch_losses,
    })
}

fn accuracy(net: &Supernet, path: &PathSample, data: &Dataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch.max(1)) {
        let pred = argmax_rows(&net.predict(path, &data.images.gather(chunk))?);
        correct += chunk.iter().zip(pred).filter(|&(&i, p)| data.labels[i] == p).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn stage_result<T>(stage: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage.name()))
}

/// Runs the stages from `from` through `report` into `cfg.out`.
pub fn run_pipeline(cfg: &ExperimentConfig, from: Stage) -> Result<Manifest> {
    let stages: Vec<Stage> = Stage::ALL.into_iter().filter(|s| *s >= from).collect();
    run_stages(cfg, &stages)
}

/// Runs `stages` in order. Each writes the resolved config and updates the
/// manifest, so a failure leaves earlier artifacts in place.
pub fn run_stages(cfg: &ExperimentConfig, stages: &[Stage]) -> Result<Manifest> {
    let dir = cfg.out.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    let mut manifest = Manifest::load_or_default(&dir)?;
    for &stage in stages {
        info!("stage {stage}");
        let artifacts = stage_result(stage, run_stage(cfg, stage, &dir, &mut manifest))?;
        manifest.record(stage, &artifacts);
        manifest.save(&dir)?;
    }
    Ok(manifest)
}

fn run_stage(cfg: &ExperimentConfig, stage: Stage, dir: &Path, manifest: &mut Manifest) -> Result<Vec<&'static str>> {
    match stage {
        Stage::Init => {
            let (train, _) = cfg.datasets()?;
            let space = cfg.search_space(&train)?;
            manifest.space_size = space.size();
            let net = Supernet::build(&space, &cfg.init)?;
            save_supernet(&net, dir, SUPERNET_INIT)?;
            Ok(vec![SUPERNET_SIDECAR, SUPERNET_INIT])
        }
        Stage::Train => {
            let (train, _) = cfg.datasets()?;
            let mut net = load_supernet(dir, SUPERNET_INIT)?;
            let mut metrics = BufWriter::new(fs::File::create(dir.join(METRICS))?);
            let report = train_indicators(&mut net, &train, &cfg.train, Some(&mut metrics))?;
            drop(metrics);
            save_supernet(&net, dir, SUPERNET_TRAINED)?;
            let summary = serde_json::json!({
                "steps": report.steps,
                "losses": report.losses,
                "fairness": report.fairness.counts,
                "layer_path_updates": report.layer_path_updates,
                "frozen_digest_before": report.frozen_digest_before,
                "frozen_digest_after": report.frozen_digest_after,
            });
            fs::write(dir.join(TRAIN_SUMMARY), serde_json::to_string_pretty(&summary)? + "\n")?;
            Ok(vec![SUPERNET_TRAINED, METRICS, TRAIN_SUMMARY])
        }
        Stage::Score => {
            let net = load_supernet(dir, SUPERNET_TRAINED)?;
            let table = compute_scores(&net.indicators());
            fs::write(dir.join(SCORES_JSON), serde_json::to_string_pretty(&table)? + "\n")?;
            table.write_csv(fs::File::create(dir.join(SCORES_CSV))?)?;
            Ok(vec![SCORES_JSON, SCORES_CSV])
        }
        Stage::Search => {
            let side: SupernetSidecar = serde_json::from_str(&fs::read_to_string(dir.join(SUPERNET_SIDECAR))?)?;
            let table: ScoreTable = serde_json::from_str(&fs::read_to_string(dir.join(SCORES_JSON))?)?;
            let ranked = search(&table, &side.space, &cfg.search, cfg.seed)?;
            ranked.write_jsonl(fs::File::create(dir.join(RANKED))?)?;
            Ok(vec![RANKED])
        }
        Stage::Retrain => {
            let side: SupernetSidecar = serde_json::from_str(&fs::read_to_string(dir.join(SUPERNET_SIDECAR))?)?;
            let ranked = RankedSubnets::read_jsonl(&fs::read_to_string(dir.join(RANKED))?)?;
            let (train, val) = cfg.datasets()?;
            let rdir = dir.join(RETRAIN_DIR);
            fs::create_dir_all(&rdir)?;
            let mut lines = String::new();
            for e in &ranked.entries {
                let out = retrain_subnet(&side.space, &side.init, &e.choices, &train, &val, &cfg.retrain)?;
                info!("rank {} {:?}: accuracy {:.4}", e.rank, e.choices, out.accuracy);
                Checkpoint::from_store(&out.net.store).save(&rdir.join(format!("rank{}.ckpt", e.rank)))?;
                let r = RetrainResult {
                    rank: e.rank,
                    choices: e.choices.clone(),
                    score: e.score,
                    accuracy: out.accuracy,
                };
                lines.push_str(&serde_json::to_string(&r)?);
                lines.push('\n');
            }
            fs::write(dir.join(RETRAIN_RESULTS), lines)?;
            Ok(vec![RETRAIN_DIR, RETRAIN_RESULTS])
        }
        Stage::Report => {
            emit_reports(dir)?;
            Ok(vec![REPORTS_DIR])
        }
    }
}

/// Top-`k` under the configured constraint and strategy.
pub fn search(table: &ScoreTable, space: &SearchSpace, cfg: &SearchConfig, seed: u64) -> Result<RankedSubnets> {
    let costs = CostTable::from_space(space);
    let strategy = cfg.strategy.unwrap_or(if space.size() <= EXHAUSTIVE_LIMIT {
        Strategy::Exhaustive
    } else {
        Strategy::Evolutionary
    });
    match strategy {
        Strategy::Exhaustive => exhaustive_topk(table, &costs, &cfg.constraint, cfg.k),
        Strategy::Evolutionary => {
            let mut rng = child_rng(seed, &[7]);
            evolutionary_topk(table, &costs, &cfg.constraint, cfg.k, &cfg.evolution, &mut rng)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportManifest {
    pub emitted: Vec<String>,
    pub skipped: Vec<String>,
    pub warnings: Vec<String>,
}

/// Writes plot-ready CSVs under `run_dir/reports` from whatever the run
/// produced. Missing inputs are skipped with a warning.
pub fn emit_reports(run_dir: &Path) -> Result<ReportManifest> {
    let out = run_dir.join(REPORTS_DIR);
    fs::create_dir_all(&out)?;
    let mut m = ReportManifest::default();
    let skip = |m: &mut ReportManifest, name: &str, input: &str| {
        let msg = format!("{name}: skipped, `{input}` not found");
        warn!("{msg}");
        m.skipped.push(name.to_string());
        m.warnings.push(msg);
    };

    let iso = run_dir.join(ISOMETRY_CSV);
    if iso.exists() {
        fs::copy(&iso, out.join("isometry.csv"))?;
        m.emitted.push("isometry.csv".into());
    } else {
        skip(&mut m, "isometry.csv", ISOMETRY_CSV);
    }

    let scores = run_dir.join(SCORES_JSON);
    if scores.exists() {
        let t: ScoreTable = serde_json::from_str(&fs::read_to_string(scores)?)?;
        let mut s = String::from("layer,candidate,score,layer_weight\n");
        for (l, row) in t.scores.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let w = t.layer_weight[l].map(|w| w.to_string()).unwrap_or_default();
                s.push_str(&format!("{l},{c},{v},{w}\n"));
            }
        }
        fs::write(out.join("score_heatmap.csv"), s)?;
        m.emitted.push("score_heatmap.csv".into());
    } else {
        skip(&mut m, "score_heatmap.csv", SCORES_JSON);
    }

    let conc = run_dir.join(CONCENTRATION_JSON);
    if conc.exists() {
        let r: ConcentrationReport = serde_json::from_str(&fs::read_to_string(conc)?)?;
        let mut s = String::from("N,p_hat,delta\n");
        for row in &r.rows {
            s.push_str(&format!("{},{},{}\n", row.n_filters, row.p_hat, row.delta));
        }
        fs::write(out.join("concentration.csv"), s)?;
        m.emitted.push("concentration.csv".into());
    } else {
        skip(&mut m, "concentration.csv", CONCENTRATION_JSON);
    }

    let retrain = run_dir.join(RETRAIN_RESULTS);
    if retrain.exists() {
        let mut s = String::from("rank,score,accuracy,choices\n");
        for line in fs::read_to_string(retrain)?.lines().filter(|l| !l.trim().is_empty()) {
            let r: RetrainResult = serde_json::from_str(line)?;
            let choices: Vec<String> = r.choices.iter().map(|c| c.to_string()).collect();
            s.push_str(&format!("{},{},{},{}\n", r.rank, r.score, r.accuracy, choices.join("-")));
        }
        fs::write(out.join("rank_vs_accuracy.csv"), s)?;
        m.emitted.push("rank_vs_accuracy.csv".into());
    } else {
        skip(&mut m, "rank_vs_accuracy.csv", RETRAIN_RESULTS);
    }

    fs::write(out.join(MANIFEST), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
out = "runs/x"

[data]
source = "synthetic"
kind = "blobs"
classes = 2
per_class = 10
size = 6
noise = 0.1
seed = 0

[space]
preset = "uniform"
pattern = "N"
channels = 4
candidates = [{ kind = "plain-conv", kernel = 3, stride = 1 }]
"#;

    #[test]
    fn parses_minimal_config() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.validation_fraction, 0.2);
        assert!(matches!(c.data, DataSource::Synthetic(ref s) if s.classes == 2));
        let (train, _) = c.datasets().unwrap();
        assert_eq!(c.search_space(&train).unwrap().size(), 1);
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let again = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for extra in ["typo = 1\n", "[train]\nepochs = 1\nbatch_size = 4\nlearning_rate = 0.1\n"] {
            let text = format!("{extra}{MINIMAL}");
            let text = if extra.starts_with('[') { format!("{MINIMAL}{extra}") } else { text };
            assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))), "{extra}");
        }
        let bad_data = MINIMAL.replace("noise = 0.1", "noise = 0.1\nnoize = 2");
        assert!(ExperimentConfig::from_toml(&bad_data).is_err());
    }

    #[test]
    fn stage_names() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("nope".parse::<Stage>().is_err());
    }

    #[test]
    fn with_seed_sets_all_run_seeds() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap().with_seed(9);
        assert_eq!((c.seed, c.init.seed, c.train.seed, c.retrain.seed), (9, 9, 9, 9));
    }
}
