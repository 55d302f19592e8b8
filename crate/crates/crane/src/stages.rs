use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crane_core::attribution::{attribute_sample, write_relevance_dump, RelevanceRecord};
use crane_core::corpus::{generate_corpus, make_mc_task, split_corpus, Corpus, LanguageId, LanguageSpec, McTask};
use crane_core::evaluation::{run_intervention_grid, transfer_eval, EvalReport, LanguageTasks, TaskKind};
use crane_core::model::{
    build_model, build_planted, deserialize_model, parse_neuron_ids, serialize_model, train, Method, NeuronSet, SelectionSidecar,
    TrainConfig,
};
use crane_core::specialization::{
    crane_select, identify, lape_select, random_select, selection_quality, ActivationAccumulator, KurtosisTable,
    RelevanceAccumulator,
};
use crane_core::{seed, Weights};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, stamp_valid, write_atomic, write_stamp, RunManifest};
use crate::config::TransferMode;
use crate::{CliError, PipelineConfig};

/// Per-seed stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenCorpus,
    BuildModel,
    Train,
    Attribute,
    Select,
    Intervene,
    Transfer,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::GenCorpus, Stage::BuildModel, Stage::Train, Stage::Attribute, Stage::Select, Stage::Intervene, Stage::Transfer];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::BuildModel => "build-model",
            Stage::Train => "train",
            Stage::Attribute => "attribute",
            Stage::Select => "select",
            Stage::Intervene => "intervene",
            Stage::Transfer => "transfer",
        }
    }
}

/// A pipeline run: config, output directory and the resolved languages.
pub struct Run {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub hash: String,
    pub languages: Vec<LanguageSpec>,
    timings: BTreeMap<String, Option<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Accumulators {
    relevance: RelevanceAccumulator,
    activation: ActivationAccumulator,
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

impl Run {
    pub fn new(cfg: PipelineConfig, out: Option<PathBuf>) -> Result<Self, CliError> {
        cfg.validate()?;
        let languages = cfg.language_specs()?;
        let out = out.unwrap_or_else(|| cfg.output_dir.clone());
        let hash = cfg.hash();
        Ok(Self { cfg, out, hash, languages, timings: BTreeMap::new() })
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("seed-{seed}"))
    }

    fn corpus_path(&self, seed: u64, lang: &LanguageId, split: &str) -> PathBuf {
        self.seed_dir(seed).join("corpus").join(format!("{lang}.{split}.txt"))
    }

    fn mc_path(&self, seed: u64, lang: &LanguageId) -> PathBuf {
        self.seed_dir(seed).join("tasks").join(format!("{lang}.mc.json"))
    }

    fn model_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("model.crn")
    }

    fn trained_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("model.trained.crn")
    }

    fn set_path(&self, seed: u64, method: Method, lang: &LanguageId) -> PathBuf {
        self.seed_dir(seed).join("sets").join(format!("{}-{lang}.txt", method.as_str()))
    }

    fn read(&self, path: &Path, stage: Stage, seed: u64) -> Result<Vec<u8>, CliError> {
        fs::read(path).map_err(|_| CliError::Missing { stage: stage.name(), seed, path: path.display().to_string() })
    }

    fn read_text(&self, path: &Path, stage: Stage, seed: u64) -> Result<String, CliError> {
        String::from_utf8(self.read(path, stage, seed)?)
            .map_err(|_| CliError::Failed(format!("{} is not UTF-8", path.display())))
    }

    fn load_model(&self, path: &Path, stage: Stage, seed: u64) -> Result<Weights, CliError> {
        Ok(deserialize_model(&self.read(path, stage, seed)?)?)
    }

    fn load_corpus(&self, seed: u64, lang: &LanguageId, split: &str) -> Result<Corpus, CliError> {
        let text = self.read_text(&self.corpus_path(seed, lang, split), Stage::GenCorpus, seed)?;
        Ok(Corpus::from_text(&text)?)
    }

    fn load_tasks(&self, seed: u64) -> Result<Vec<LanguageTasks>, CliError> {
        self.languages
            .iter()
            .map(|l| {
                let mc: McTask = serde_json::from_str(&self.read_text(&self.mc_path(seed, &l.id), Stage::GenCorpus, seed)?)
                    .map_err(|e| CliError::Failed(format!("task file for {}: {e}", l.id)))?;
                Ok(LanguageTasks { language: l.id.clone(), mc, heldout: self.load_corpus(seed, &l.id, "heldout")? })
            })
            .collect()
    }

    fn load_sets(&self, seed: u64) -> Result<BTreeMap<(Method, LanguageId), NeuronSet>, CliError> {
        let mut sets = BTreeMap::new();
        for &method in &self.cfg.selection.methods {
            for l in &self.languages {
                let path = self.set_path(seed, method, &l.id);
                let ids = parse_neuron_ids(&self.read_text(&path, Stage::Select, seed)?)?;
                let sidecar: SelectionSidecar =
                    serde_json::from_str(&self.read_text(&path.with_extension("json"), Stage::Select, seed)?)
                        .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
                sets.insert((method, l.id.clone()), sidecar.into_set(ids)?);
            }
        }
        Ok(sets)
    }

    fn write(&self, outputs: &mut Vec<PathBuf>, path: PathBuf, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&path, bytes)?;
        outputs.push(path);
        Ok(())
    }

    fn write_report(&self, outputs: &mut Vec<PathBuf>, dir: &Path, report: &EvalReport) -> Result<(), CliError> {
        let mut csv = Vec::new();
        report.write_csv(&mut csv)?;
        self.write(outputs, dir.join("report.csv"), &csv)?;
        self.write(outputs, dir.join("summary.json"), &json(&report.summary_json()))?;
        let mut heat = Vec::new();
        report.write_heatmap(&mut heat)?;
        self.write(outputs, dir.join("heatmap.csv"), &heat)?;
        self.write(outputs, dir.join("report.json"), &json(report))
    }

    fn stage_body(&self, stage: Stage, seed: u64) -> Result<Vec<PathBuf>, CliError> {
        let mut outputs = Vec::new();
        let cfg = &self.cfg;
        match stage {
            Stage::GenCorpus => {
                let n_train = cfg.identification.samples_per_language;
                let n_held = cfg.evaluation.heldout_samples;
                let fraction = n_held as f64 / (n_train + n_held) as f64;
                for l in &self.languages {
                    let all = generate_corpus(l, n_train + n_held, cfg.corpus.seq_len, seed::derive_seed(seed, &format!("corpus/{}", l.id)))?;
                    let (tr, held) = split_corpus(&all, fraction, seed::derive_seed(seed, &format!("split/{}", l.id)))?;
                    let mc = make_mc_task(&held, l.vocab, cfg.evaluation.mc_items, seed::derive_seed(seed, &format!("mc/{}", l.id)))?;
                    self.write(&mut outputs, self.corpus_path(seed, &l.id, "train"), tr.to_text().as_bytes())?;
                    self.write(&mut outputs, self.corpus_path(seed, &l.id, "heldout"), held.to_text().as_bytes())?;
                    self.write(&mut outputs, self.mc_path(seed, &l.id), &json(&mc))?;
                }
            }
            Stage::BuildModel => {
                let model_seed = seed::derive_seed(seed, "model");
                let weights: Weights = match &cfg.plant {
                    Some(plant) => {
                        let p = build_planted(cfg.model, plant, &self.languages, model_seed)?;
                        for (lang, set) in &p.ground_truth {
                            let path = self.seed_dir(seed).join("ground_truth").join(format!("{lang}.txt"));
                            self.write(&mut outputs, path, set.to_text().as_bytes())?;
                        }
                        self.write(&mut outputs, self.seed_dir(seed).join("planted.json"), &json(&p.neurons))?;
                        p.weights
                    }
                    None => build_model(cfg.model, model_seed)?,
                };
                self.write(&mut outputs, self.model_path(seed), &serialize_model(&weights)?)?;
            }
            Stage::Train => {
                let base = self.read(&self.model_path(seed), Stage::BuildModel, seed)?;
                if cfg.training.steps == 0 {
                    self.write(&mut outputs, self.trained_path(seed), &base)?;
                } else {
                    let weights: Weights = deserialize_model(&base)?;
                    let mixed = self.mixed_train_corpus(seed)?;
                    let hyper = TrainConfig {
                        lr: cfg.training.lr,
                        steps: cfg.training.steps,
                        batch: cfg.training.batch,
                        seed: seed::derive_seed(seed, "train"),
                    };
                    let outcome = train(&weights, &mixed, &hyper)?;
                    self.write(&mut outputs, self.trained_path(seed), &serialize_model(&outcome.weights)?)?;
                    self.write(&mut outputs, self.seed_dir(seed).join("train_losses.json"), &json(&outcome.losses))?;
                }
            }
            Stage::Attribute => {
                let weights = self.load_model(&self.trained_path(seed), Stage::Train, seed)?;
                let corpora = self
                    .languages
                    .iter()
                    .map(|l| Ok((l.id.clone(), self.load_corpus(seed, &l.id, "train")?.samples)))
                    .collect::<Result<Vec<_>, CliError>>()?;
                let views: Vec<(LanguageId, &[Vec<u32>])> = corpora.iter().map(|(l, s)| (l.clone(), s.as_slice())).collect();
                let lrp = cfg.identification.lrp();
                let (relevance, activation) = identify(&weights, &views, &lrp)?;
                self.write(&mut outputs, self.seed_dir(seed).join("accumulators.json"), &json(&Accumulators { relevance, activation }))?;
                if cfg.identification.dump_relevance {
                    let mut records = Vec::new();
                    for (lang, samples) in &corpora {
                        for s in samples {
                            records.push(RelevanceRecord::from(&attribute_sample(&weights, s, lang, &lrp)?));
                        }
                    }
                    let mut bytes = Vec::new();
                    write_relevance_dump(&mut bytes, weights.config.layout(), &records)?;
                    self.write(&mut outputs, self.seed_dir(seed).join("relevance.crnr"), &bytes)?;
                }
            }
            Stage::Select => {
                let text = self.read_text(&self.seed_dir(seed).join("accumulators.json"), Stage::Attribute, seed)?;
                let acc: Accumulators =
                    serde_json::from_str(&text).map_err(|e| CliError::Failed(format!("accumulators.json: {e}")))?;
                let table = KurtosisTable::from_accumulator(&acc.relevance);
                let mut csv = Vec::new();
                table.write_csv(&mut csv)?;
                self.write(&mut outputs, self.seed_dir(seed).join("kurtosis.csv"), &csv)?;
                let sel = cfg.selection.config();
                let layout = cfg.model.layout();
                let select_seed = seed::derive_seed(seed, "select");
                for &method in &cfg.selection.methods {
                    for l in &self.languages {
                        let (set, threshold, s) = match method {
                            Method::Crane => (crane_select(&table, &l.id, &sel)?, Some(sel.threshold), None),
                            Method::Lape => (lape_select(&acc.activation, &l.id, &sel)?, None, None),
                            Method::Random => (random_select(layout, Some(&l.id), &sel, select_seed)?, None, Some(select_seed)),
                            Method::Planted => unreachable!("rejected by config validation"),
                        };
                        let path = self.set_path(seed, method, &l.id);
                        self.write(&mut outputs, path.clone(), set.to_text().as_bytes())?;
                        self.write(&mut outputs, path.with_extension("json"), &json(&set.sidecar(threshold, s)))?;
                    }
                }
            }
            Stage::Intervene => {
                let weights = self.load_model(&self.trained_path(seed), Stage::Train, seed)?;
                let sets = self.load_sets(seed)?;
                let tasks = self.load_tasks(seed)?;
                let mut report = run_intervention_grid(&weights, &sets, &tasks, cfg.evaluation.epsilon)?;
                report.seeds = vec![seed];
                self.write_report(&mut outputs, &self.seed_dir(seed), &report)?;
            }
            Stage::Transfer => {
                if !cfg.transfer.enabled {
                    return Ok(outputs);
                }
                let weights = self.load_model(&self.trained_path(seed), Stage::Train, seed)?;
                let sets = self.load_sets(seed)?;
                let tasks = self.load_tasks(seed)?;
                let transfer_seed = seed::derive_seed(seed, "transfer");
                let dest = match cfg.transfer.mode {
                    TransferMode::Finetune => {
                        let mixed = self.mixed_train_corpus(seed)?;
                        train(&weights, &mixed, &cfg.transfer.train_config(transfer_seed))?.weights
                    }
                    TransferMode::Perturb => perturb(&weights, cfg.transfer.sigma, transfer_seed),
                };
                self.write(&mut outputs, self.seed_dir(seed).join("model.transfer.crn"), &serialize_model(&dest)?)?;
                let mut report = transfer_eval(&weights.config, &sets, &dest, &tasks, cfg.evaluation.epsilon)?;
                report.seeds = vec![seed];
                self.write_report(&mut outputs, &self.seed_dir(seed).join("transfer"), &report)?;
            }
        }
        Ok(outputs)
    }

    /// Train splits of all languages interleaved sample by sample.
    fn mixed_train_corpus(&self, seed: u64) -> Result<Vec<Vec<u32>>, CliError> {
        let corpora = self
            .languages
            .iter()
            .map(|l| self.load_corpus(seed, &l.id, "train"))
            .collect::<Result<Vec<_>, CliError>>()?;
        let longest = corpora.iter().map(Corpus::len).max().unwrap_or(0);
        Ok((0..longest).flat_map(|i| corpora.iter().filter_map(move |c| c.samples.get(i).cloned())).collect())
    }

    /// Runs one stage for one seed. Without `force`, a stage whose stamp
    /// matches the config hash and whose outputs are intact is reused.
    pub fn execute(&mut self, stage: Stage, seed: u64, force: bool) -> Result<(), CliError> {
        let key = format!("seed-{seed}/{}", stage.name());
        if !force && stamp_valid(&self.out, stage.name(), seed, &self.hash) {
            eprintln!("[crane] {key}: reusing cached artifacts");
            self.timings.insert(key, None);
            return Ok(());
        }
        let t0 = Instant::now();
        let outputs = self.stage_body(stage, seed).map_err(|e| match e {
            CliError::Failed(reason) => CliError::Stage { stage: stage.name(), seed, reason },
            other => other,
        })?;
        write_stamp(&self.out, stage.name(), seed, &self.hash, &outputs)?;
        let secs = t0.elapsed().as_secs_f64();
        eprintln!("[crane] {key}: done in {secs:.2}s");
        self.timings.insert(key, Some(secs));
        Ok(())
    }

    /// Aggregates per-seed reports into the run-level report, summary,
    /// heatmap and advisory files.
    pub fn report(&mut self) -> Result<(), CliError> {
        let t0 = Instant::now();
        let mut rows = String::from("seed,method,mask_lang,task,language,original,masked,delta,clamped_delta\n");
        let mut transfer_rows = rows.clone();
        let mut per_seed = Vec::new();
        let mut advisory = Vec::new();
        let mut f1: BTreeMap<(String, String, TaskKind), Vec<f64>> = BTreeMap::new();
        let mut heat: BTreeMap<(String, String, TaskKind, LanguageId), Vec<f64>> = BTreeMap::new();
        let seeds = self.cfg.seeds.clone();
        for &seed in &seeds {
            let dir = self.seed_dir(seed);
            let report: EvalReport = serde_json::from_str(&self.read_text(&dir.join("report.json"), Stage::Intervene, seed)?)
                .map_err(|e| CliError::Failed(format!("report.json of seed {seed}: {e}")))?;
            for r in &report.rows {
                rows.push_str(&format!(
                    "{seed},{},{},{},{},{},{},{},{}\n",
                    r.method,
                    r.mask_lang,
                    r.task.as_str(),
                    r.language,
                    r.original,
                    r.masked,
                    r.delta,
                    r.clamped_delta
                ));
                heat.entry((r.method.clone(), r.mask_lang.clone(), r.task, r.language.clone())).or_default().push(r.clamped_delta);
            }
            for s in &report.summary {
                for (kind, v) in &s.scores {
                    f1.entry((s.method.clone(), s.mask_lang.to_string(), *kind)).or_default().push(v.langspec_f1);
                }
            }
            let mut entry = serde_json::json!({ "seed": seed, "in_model": report.summary_json() });
            if self.cfg.transfer.enabled {
                let t: EvalReport =
                    serde_json::from_str(&self.read_text(&dir.join("transfer").join("report.json"), Stage::Transfer, seed)?)
                        .map_err(|e| CliError::Failed(format!("transfer report of seed {seed}: {e}")))?;
                for r in &t.rows {
                    transfer_rows.push_str(&format!(
                        "{seed},{},{},{},{},{},{},{},{}\n",
                        r.method,
                        r.mask_lang,
                        r.task.as_str(),
                        r.language,
                        r.original,
                        r.masked,
                        r.delta,
                        r.clamped_delta
                    ));
                }
                entry["transfer"] = t.summary_json();
            }
            if self.cfg.plant.is_some() {
                let mut recovery = serde_json::Map::new();
                for l in &self.languages {
                    if !self.cfg.selection.methods.contains(&Method::Crane) {
                        break;
                    }
                    let gt_text = self.read_text(&dir.join("ground_truth").join(format!("{}.txt", l.id)), Stage::BuildModel, seed)?;
                    let gt = NeuronSet::new(parse_neuron_ids(&gt_text)?, Method::Planted, Some(l.id.clone()), usize::MAX)?;
                    let sel = &self.load_sets(seed)?[&(Method::Crane, l.id.clone())];
                    recovery.insert(l.id.to_string(), serde_json::to_value(selection_quality(sel, &gt)).expect("plain struct"));
                }
                entry["planted_recovery"] = recovery.into();
            }
            for ((method, lang), set) in self.load_sets(seed)? {
                if set.len() < set.budget {
                    advisory.push(format!(
                        "seed {seed}: {method}/{lang} selected {} of {} neurons (too few candidates)",
                        set.len(),
                        set.budget
                    ));
                }
            }
            per_seed.push(entry);
        }
        if self.cfg.identification.samples_per_language < self.cfg.identification.min_samples {
            advisory.push(format!(
                "{} identification samples per language is below the recommended {}",
                self.cfg.identification.samples_per_language, self.cfg.identification.min_samples
            ));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mean_f1: Vec<serde_json::Value> = f1
            .iter()
            .map(|((m, l, k), v)| serde_json::json!({ "method": m, "mask_lang": l, "task": k.as_str(), "mean_langspec_f1": mean(v), "runs": v.len() }))
            .collect();
        let summary = serde_json::json!({
            "config_hash": self.hash,
            "seeds": seeds,
            "budget": self.cfg.selection.budget,
            "epsilon": self.cfg.evaluation.epsilon,
            "lape_label": Method::Lape.as_str(),
            "mean_over_seeds": mean_f1,
            "per_seed": per_seed,
        });
        let mut heatmap = String::from("method,mask_lang,task,language,mean_clamped_delta\n");
        for ((m, l, k, lang), v) in &heat {
            heatmap.push_str(&format!("{m},{l},{},{lang},{}\n", k.as_str(), mean(v)));
        }
        write_atomic(&self.out.join("report.csv"), rows.as_bytes())?;
        write_atomic(&self.out.join("summary.json"), &json(&summary))?;
        write_atomic(&self.out.join("heatmap.csv"), heatmap.as_bytes())?;
        write_atomic(&self.out.join("advisory.json"), &json(&advisory))?;
        if self.cfg.transfer.enabled {
            write_atomic(&self.out.join("transfer_report.csv"), transfer_rows.as_bytes())?;
        }
        write_atomic(&self.out.join("config.canonical.json"), self.cfg.canonical().as_bytes())?;
        self.timings.insert("report".into(), Some(t0.elapsed().as_secs_f64()));
        Ok(())
    }

    /// Writes the timings file and the manifest.
    pub fn finish(&self) -> Result<RunManifest, CliError> {
        write_atomic(&self.out.join(artifacts::TIMINGS), &json(&self.timings))?;
        artifacts::write_manifest(&self.out, &self.hash)
    }
}

/// Adds `sigma · rms(tensor) · N(0, 1)` to every entry of every matrix.
fn perturb(weights: &Weights, sigma: f64, seed: u64) -> Weights {
    let mut w = weights.clone();
    let mut rng = seed::rng(seed);
    for (name, t) in w.tensors_mut() {
        if name.ends_with("norm") {
            continue;
        }
        let rms = (t.iter().map(|x| x * x).sum::<f64>() / t.len().max(1) as f64).sqrt();
        for v in t.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * rms * z;
        }
    }
    w
}

/// All stages for every seed, then the report and the manifest. Stages with
/// valid stamps are reused.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest, CliError> {
    let mut run = Run::new(cfg.clone(), None)?;
    for &seed in &cfg.seeds {
        for stage in Stage::ALL {
            run.execute(stage, seed, false)?;
        }
    }
    run.report()?;
    run.finish()
}
