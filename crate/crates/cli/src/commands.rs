use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use commer_core::backbone::{pretrain_backbone as fit_backbone, BackboneConfig, FrozenBackbone, PretrainConfig};
use commer_core::compressor::Compression;
use commer_core::container::{sha256_hex, Container};
use commer_core::datasets::{
    backbone_corpus, gen_generic_corpus, gen_knowledge_dataset, gen_skill_dataset, load_jsonl, pretrain_examples,
    write_splits, CorpusConfig, Example, KnowledgeConfig, SkillConfig, Splits, DEFAULT_CHAR_CAP,
};
use commer_core::evaluation::{self, gen_matrix, powerlaw_fit, read_results_csv, results_csv_bytes, tradeoff_report, EvalResult, GenMatrix};
use commer_core::generator;
use commer_core::merger::{CompressionStore, StoreDir, StoreOrigin};
use commer_core::training::{self, load_checkpoint, trace_csv_bytes, Method, Model, RunConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::config::{self, take_path};
use crate::rundir::{Manifest, RunDir};
use crate::{Common, ReportKind, Task};

fn load_backbone(path: &Path) -> Result<FrozenBackbone> {
    let c = Container::read(path)?;
    FrozenBackbone::from_container(&c).with_context(|| format!("loading backbone {}", path.display()))
}

fn read_split(data: &Path, name: &str) -> Result<Vec<Example>> {
    Ok(load_jsonl(&data.join(format!("{name}.jsonl")), DEFAULT_CHAR_CAP)?.examples)
}

fn with_seed(table: &mut Table, key: &str, seed: Option<u64>) -> Result<()> {
    if let Some(s) = seed {
        config::set(table, key, Value::Integer(i64::try_from(s).context("seed does not fit a TOML integer")?))?;
    }
    Ok(())
}

/// Settings of `gen-data pretrain`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainDataConfig {
    pub generic_docs: usize,
    pub max_docs: usize,
    pub val_examples: usize,
    pub seed: u64,
}

impl Default for PretrainDataConfig {
    fn default() -> Self {
        Self { generic_docs: 8000, max_docs: 4, val_examples: 64, seed: 0 }
    }
}

pub fn gen_data(task: Task, users: Option<usize>, docs: Option<usize>, out: &Path, c: &Common) -> Result<()> {
    let dir = RunDir::open(out)?;
    let int = |v: usize| Value::Integer(v as i64);
    let (splits, params): (Splits, serde_json::Value) = match task {
        Task::Skill => {
            let mut t = config::layered(&SkillConfig::default(), c.config.as_deref(), &c.overrides)?;
            if let Some(u) = users {
                t.insert("n_users".into(), int(u));
            }
            if let Some(d) = docs {
                t.insert("docs_per_user".into(), int(d));
            }
            with_seed(&mut t, "seed", c.seed)?;
            let cfg: SkillConfig = config::decode(t, "skill")?;
            (gen_skill_dataset(&cfg)?.0, serde_json::to_value(&cfg)?)
        }
        Task::Knowledge => {
            let mut t = config::layered(&KnowledgeConfig::default(), c.config.as_deref(), &c.overrides)?;
            if let Some(u) = users {
                t.insert("n_users".into(), int(u));
            }
            if let Some(d) = docs {
                t.insert("docs_per_example".into(), int(d));
            }
            with_seed(&mut t, "seed", c.seed)?;
            let cfg: KnowledgeConfig = config::decode(t, "knowledge")?;
            (gen_knowledge_dataset(&cfg)?.0, serde_json::to_value(&cfg)?)
        }
        Task::Pretrain => {
            ensure!(users.is_none(), "--users does not apply to pretraining data");
            let mut t = config::layered(&PretrainDataConfig::default(), c.config.as_deref(), &c.overrides)?;
            if let Some(d) = docs {
                t.insert("max_docs".into(), int(d));
            }
            with_seed(&mut t, "seed", c.seed)?;
            let cfg: PretrainDataConfig = config::decode(t, "pretraining data")?;
            let corpus = gen_generic_corpus(cfg.generic_docs, cfg.seed);
            let mut train = pretrain_examples(&corpus, cfg.max_docs, cfg.seed.wrapping_add(1))?;
            ensure!(train.len() > cfg.val_examples, "{} examples cannot spare {} for validation", train.len(), cfg.val_examples);
            let val = train.split_off(train.len() - cfg.val_examples);
            (Splits { train, val, test: Vec::new() }, serde_json::to_value(&cfg)?)
        }
    };
    let seed = params["seed"].as_u64();
    write_splits(&dir.path, &splits, params.clone())?;
    // Fold the invocation details into the dataset manifest.
    let mpath = dir.file("manifest.json");
    let mut data: serde_json::Value = serde_json::from_slice(&fs::read(&mpath)?)?;
    let m = Manifest::new("gen-data", &params, seed)?;
    data["command"] = m.command.into();
    data["argv"] = m.argv.into();
    data["version"] = m.version.into();
    data["git_describe"] = m.git_describe.into();
    dir.write("manifest.json", &serde_json::to_vec_pretty(&data)?)?;
    println!(
        "wrote {} train / {} val / {} test examples to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneRun {
    pub model: BackboneConfig,
    pub corpus: CorpusConfig,
    pub train: PretrainConfig,
}

pub fn pretrain_backbone(out: &Path, c: &Common) -> Result<()> {
    let mut t = config::layered(&BackboneRun::default(), c.config.as_deref(), &c.overrides)?;
    with_seed(&mut t, "train.seed", c.seed)?;
    let cfg: BackboneRun = config::decode(t, "backbone")?;
    cfg.model.validate()?;
    let dir = RunDir::open(out)?;
    Manifest::new("pretrain-backbone", &cfg, Some(cfg.train.seed))?.write(&dir)?;
    let corpus = backbone_corpus(&cfg.corpus)?;
    log::info!("corpus of {} sequences", corpus.len());
    let mut losses = csv_writer(["step", "loss"]);
    let every = (cfg.train.steps / 20).max(1);
    let frozen = fit_backbone(&corpus, cfg.model.clone(), &cfg.train, |step, loss| {
        if step % every == 0 || step + 1 == cfg.train.steps {
            log::info!("step {step} loss {loss:.4}");
        }
        losses.push(vec![step.to_string(), loss.to_string()]);
    })?;
    dir.write("backbone.bin", &frozen.to_container().to_bytes())?;
    dir.write("loss.csv", &losses.finish()?)?;
    println!("backbone {} written to {}", frozen.hash, dir.file("backbone.bin").display());
    Ok(())
}

/// Rows collected in memory and serialized once.
struct CsvRows {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn csv_writer<const N: usize>(header: [&str; N]) -> CsvRows {
    CsvRows { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
}

impl CsvRows {
    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn finish(self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        Ok(w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?)
    }
}

/// Paths and hyperparameters of a fine-tuning or pretraining run, as kept
/// in `<run>/config.toml`.
struct RunSpec {
    backbone: PathBuf,
    data: PathBuf,
    init: Option<PathBuf>,
    cfg: RunConfig,
}

impl RunSpec {
    fn table(&self) -> Result<Table> {
        let mut t = Table::try_from(&self.cfg)?;
        let s = |p: &Path| Value::String(p.display().to_string());
        t.insert("backbone".into(), s(&self.backbone));
        t.insert("data".into(), s(&self.data));
        if let Some(i) = &self.init {
            t.insert("init".into(), s(i));
        }
        Ok(t)
    }

    fn from_table(mut t: Table, backbone: Option<PathBuf>, data: Option<PathBuf>, init: Option<PathBuf>) -> Result<Self> {
        let (fb, fd, fi) = (take_path(&mut t, "backbone")?, take_path(&mut t, "data")?, take_path(&mut t, "init")?);
        let cfg: RunConfig = config::decode(t, "run")?;
        cfg.validate()?;
        Ok(Self {
            backbone: backbone.or(fb).context("no backbone: pass --backbone or set `backbone` in the config")?,
            data: data.or(fd).context("no data: pass --data or set `data` in the config")?,
            init: init.or(fi),
            cfg,
        })
    }

    fn load(run: &Path) -> Result<Self> {
        Self::from_table(config::read_table(&run.join("config.toml"))?, None, None, None)
    }
}

/// Backbone, checkpoint path and rebuilt model of a finished run.
fn load_run(run: &Path) -> Result<(RunSpec, FrozenBackbone, PathBuf, Model)> {
    let spec = RunSpec::load(run)?;
    let bb = load_backbone(&spec.backbone)?;
    let ckpt_path = run.join("ckpt.bin");
    let ckpt = load_checkpoint(&ckpt_path, &bb)?;
    let model = ckpt.model(&bb)?;
    Ok((spec, bb, ckpt_path, model))
}

pub fn pretrain(backbone: Option<PathBuf>, data: Option<PathBuf>, out: Option<PathBuf>, c: &Common) -> Result<()> {
    fit(true, backbone, data, None, out, c)
}

pub fn train(backbone: Option<PathBuf>, data: Option<PathBuf>, init: Option<PathBuf>, out: Option<PathBuf>, c: &Common) -> Result<()> {
    fit(false, backbone, data, init, out, c)
}

fn fit(pretraining: bool, backbone: Option<PathBuf>, data: Option<PathBuf>, init: Option<PathBuf>, out: Option<PathBuf>, c: &Common) -> Result<()> {
    let mut t = config::layered(&RunConfig::default(), c.config.as_deref(), &c.overrides)?;
    with_seed(&mut t, "seed", c.seed)?;
    let file_out = take_path(&mut t, "out")?;
    let out = out
        .or(file_out)
        .or_else(|| c.config.as_ref().map(|p| p.with_extension("")))
        .context("no run directory: pass --out, set `out`, or use --config")?;
    let spec = RunSpec::from_table(t, backbone, data, init)?;
    ensure!(!(pretraining && spec.init.is_some()), "pretraining starts from fresh trainables; drop `init`");
    let dir = RunDir::open(&out)?;
    let resolved = spec.table()?;
    let mut manifest = Manifest::new(if pretraining { "pretrain" } else { "train" }, &resolved, Some(spec.cfg.seed))?;
    manifest.input(&spec.backbone)?;
    for split in ["train", "val"] {
        manifest.input(&spec.data.join(format!("{split}.jsonl")))?;
    }
    if let Some(i) = &spec.init {
        manifest.input(i)?;
    }
    manifest.write(&dir)?;
    dir.write("config.toml", toml::to_string(&resolved)?.as_bytes())?;

    let bb = load_backbone(&spec.backbone)?;
    let train_set = read_split(&spec.data, "train")?;
    let val_set = read_split(&spec.data, "val")?;
    let outcome = if pretraining {
        training::pretrain_commer(&spec.cfg, &train_set, &val_set, &bb)?
    } else {
        let init = spec.init.as_deref().map(|p| load_checkpoint(p, &bb)).transpose()?;
        training::train(&spec.cfg, &train_set, &val_set, &bb, init.as_ref())?
    };
    dir.write("ckpt.bin", &outcome.checkpoint.to_bytes()?)?;
    dir.write("trace.csv", &trace_csv_bytes(&outcome.trace)?)?;
    println!(
        "{} steps; best validation perplexity {:.4} at step {}; run in {}",
        outcome.steps_run,
        outcome.checkpoint.best_val_perplexity,
        outcome.checkpoint.best_step,
        out.display()
    );
    Ok(())
}

pub fn eval(
    run: &Path,
    n_docs: &[usize],
    split: &str,
    rouge_tokens: Option<usize>,
    doc_seed: u64,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (spec, _bb, ckpt_path, model) = load_run(run)?;
    let data = data.unwrap_or(spec.data.clone());
    let split_path = data.join(format!("{split}.jsonl"));
    let examples = load_jsonl(&split_path, DEFAULT_CHAR_CAP)?.examples;
    ensure!(!examples.is_empty(), "{} has no examples", split_path.display());
    let counts = if n_docs.is_empty() { vec![spec.cfg.n_docs] } else { n_docs.to_vec() };
    let dir = RunDir::open(&out.unwrap_or_else(|| run.join("eval")))?;
    let settings = serde_json::json!({
        "run": run.display().to_string(),
        "split": split,
        "n_docs": counts,
        "max_new_tokens": rouge_tokens,
        "doc_seed": doc_seed,
    });
    let mut manifest = Manifest::new("eval", &settings, Some(doc_seed))?;
    manifest.input(&ckpt_path)?;
    manifest.input(&spec.backbone)?;
    manifest.input(&split_path)?;
    manifest.write(&dir)?;

    let cfg = &spec.cfg;
    let mut results = Vec::new();
    for &n in &counts {
        let scored = evaluation::score(&model, &examples, n, doc_seed)?;
        let rouge = match rouge_tokens {
            Some(max) => {
                let (outs, mean) = evaluation::generate_and_score(&model, &examples, n, doc_seed, max)?;
                let rows: Vec<serde_json::Value> = examples
                    .iter()
                    .zip(&outs)
                    .map(|(e, o)| serde_json::json!({ "user_id": e.user_id, "x": e.x, "y": e.y, "output": o }))
                    .collect();
                let mut buf = Vec::new();
                for r in rows {
                    serde_json::to_writer(&mut buf, &r)?;
                    buf.push(b'\n');
                }
                dir.write(&format!("generations_n{n}.jsonl"), &buf)?;
                Some(mean)
            }
            None => None,
        };
        let r = EvalResult {
            method: cfg.method.name().into(),
            m: cfg.m,
            n_docs_train: cfg.n_docs,
            n_docs_test: n,
            prompt_tokens: scored.mean_prompt_tokens(),
            perplexity: scored.perplexity(),
            rouge_l: rouge,
            n_examples: examples.len(),
            seed: cfg.seed,
        };
        println!(
            "{} m={} train_docs={} test_docs={n}: perplexity {:.4}, prompt tokens {:.1}{}",
            r.method,
            r.m,
            r.n_docs_train,
            r.perplexity,
            r.prompt_tokens,
            r.rouge_l.map(|v| format!(", ROUGE-L {v:.4}")).unwrap_or_default()
        );
        results.push(r);
    }
    dir.write("results.csv", &results_csv_bytes(&results)?)?;
    Ok(())
}

fn origin_of(bb: &FrozenBackbone, ckpt: &Path) -> Result<StoreOrigin> {
    let bytes = fs::read(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    Ok(StoreOrigin { backbone_hash: bb.hash.clone(), checkpoint_hash: sha256_hex(&bytes) })
}

fn check_origin(store: &CompressionStore, origin: &StoreOrigin) -> Result<()> {
    ensure!(
        store.origin == *origin,
        "store for {} was built with backbone {} and checkpoint {}, not this run",
        store.user_id,
        store.origin.backbone_hash,
        store.origin.checkpoint_hash
    );
    Ok(())
}

fn commer_run(run: &Path) -> Result<(FrozenBackbone, StoreOrigin, Model)> {
    let (_, bb, ckpt, model) = load_run(run)?;
    ensure!(
        model.parts.method == Method::Commer,
        "stores hold mean-pooled compressions; run {} uses {}",
        run.display(),
        model.parts.method
    );
    let origin = origin_of(&bb, &ckpt)?;
    Ok((bb, origin, model))
}

pub fn store_add(root: &Path, user: &str, run: &Path, mut docs: Vec<String>, files: &[PathBuf], retain_text: bool) -> Result<()> {
    for f in files {
        docs.push(fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?);
    }
    ensure!(!docs.is_empty(), "nothing to add: pass --doc or --doc-file");
    let (bb, origin, model) = commer_run(run)?;
    let compressor = model.parts.compressor().expect("ComMer runs have a compressor");
    let sd = StoreDir::new(root, user)?;
    if sd.exists() {
        check_origin(&sd.load()?, &origin)?;
    }
    let (m, d) = (compressor.m(), bb.backbone.config.d_model);
    for doc in &docs {
        let c = compressor.compress(&model.store, doc)?;
        let s = sd.add(&c, doc, || CompressionStore::new(user, m, d, retain_text, origin.clone()))?;
        println!("{user}: {} documents, version {}", s.doc_count(), s.version);
    }
    Ok(())
}

pub fn store_show(root: &Path, user: &str) -> Result<()> {
    let s = StoreDir::new(root, user)?.load()?;
    let view = serde_json::json!({
        "manifest": s.manifest(),
        "m": s.m,
        "d_model": s.d,
        "retains_text": s.texts.is_some(),
        "origin": s.origin,
        "duplicates": s.provenance.iter().filter(|p| p.duplicate).count(),
    });
    println!("{}", serde_json::to_string_pretty(&view)?);
    Ok(())
}

pub fn store_audit(root: &Path, user: &str, run: &Path, tolerance: f64) -> Result<()> {
    let (_, origin, model) = commer_run(run)?;
    let s = StoreDir::new(root, user)?.load()?;
    check_origin(&s, &origin)?;
    let diff = s.audit(model.parts.compressor().expect("ComMer runs have a compressor"), &model.store)?;
    println!("{user}: max |stored - recomputed| = {diff:.3e} over {} documents", s.doc_count());
    ensure!(diff <= tolerance, "audit failed: {diff:.3e} exceeds {tolerance:.1e}");
    Ok(())
}

pub fn generate(run: &Path, x: &str, docs: &[String], store: Option<(&Path, &str)>, max_new_tokens: usize) -> Result<()> {
    let text = match store {
        Some((root, user)) => {
            ensure!(docs.is_empty(), "pass either --doc or --store-root, not both");
            let (_, origin, model) = commer_run(run)?;
            let s = StoreDir::new(root, user)?.load()?;
            check_origin(&s, &origin)?;
            let agg = s.aggregate().with_context(|| format!("store for {user} is empty"))?;
            let bb = &model.parts.backbone;
            generator::decode_greedy(
                bb,
                &model.store,
                |g| {
                    let p = generator::prefix_node(g, &agg);
                    generator::build_input_commer(g, bb, Some(p), x)
                },
                max_new_tokens,
            )?
        }
        None => {
            let (_, _, _, model) = load_run(run)?;
            let cache = model.compress_unique(docs)?;
            let comps: Vec<&Compression> = docs.iter().filter_map(|d| cache.get(d)).collect();
            let parts = &model.parts;
            generator::decode_greedy(
                &parts.backbone,
                &model.store,
                |g| parts.input_from_compressions(g, &model.store, docs, &comps, x),
                max_new_tokens,
            )?
        }
    };
    println!("{text}");
    Ok(())
}

fn find_results(dir: &Path, skip: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> =
        fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            if p != skip {
                find_results(&p, skip, found)?;
            }
        } else if p.file_name().is_some_and(|n| n == "results.csv") {
            found.push(p);
        }
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn report(kind: ReportKind, runs: &Path, out: &Path, method: &str, m: usize, title: &str) -> Result<()> {
    let mut files = Vec::new();
    find_results(runs, out, &mut files)?;
    ensure!(!files.is_empty(), "no results.csv under {}", runs.display());
    let dir = RunDir::open(out)?;
    let settings = serde_json::json!({ "kind": format!("{kind:?}").to_lowercase(), "runs": runs.display().to_string(), "method": method, "m": m, "title": title });
    let mut manifest = Manifest::new("report", &settings, None)?;
    let mut results: Vec<EvalResult> = Vec::new();
    for f in &files {
        manifest.input(f)?;
        results.extend(read_results_csv(f)?);
    }
    manifest.write(&dir)?;
    dir.write("results.csv", &results_csv_bytes(&results)?)?;
    let selected: Vec<&EvalResult> = results.iter().filter(|r| r.method == method && r.m == m).collect();
    match kind {
        ReportKind::Tradeoff => {
            let r = tradeoff_report(&results, title)?;
            r.write(&dir.path)?;
            for (method, n, m) in &r.missing {
                log::warn!("no result for {method} with {n} documents at m={m}");
            }
            match r.crossover_budget {
                Some(b) => println!("ComMer dominates prompt tuning up to a budget of {b:.1} prompt tokens"),
                None => println!("no budget where ComMer dominates prompt tuning"),
            }
        }
        ReportKind::Scaling => {
            let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for r in selected.iter().filter(|r| r.n_docs_train == r.n_docs_test) {
                by_n.entry(r.n_docs_test).or_default().push(r.perplexity);
            }
            let points: Vec<(f64, f64)> = by_n.into_iter().map(|(n, v)| (n as f64, median(v))).collect();
            let fit = powerlaw_fit(&points)?;
            let mut rows = csv_writer(["n_docs", "median_perplexity", "fitted"]);
            for &(n, p) in &points {
                rows.push(vec![n.to_string(), p.to_string(), (fit.a + fit.b * n.ln()).exp().to_string()]);
            }
            dir.write("scaling.csv", &rows.finish()?)?;
            dir.write("fit.json", &serde_json::to_vec_pretty(&serde_json::json!({ "a": fit.a, "b": fit.b, "r2": fit.r2 }))?)?;
            println!("perplexity ~ exp({:.4}) * n^{:.4}, R^2 = {:.4}", fit.a, fit.b, fit.r2);
        }
        ReportKind::Matrix => {
            let grid: Vec<usize> = selected.iter().map(|r| r.n_docs_train).collect::<BTreeSet<_>>().into_iter().collect();
            let seeds: BTreeSet<u64> = selected.iter().map(|r| r.seed).collect();
            ensure!(!grid.is_empty(), "no {method} results at m={m}");
            let mats = seeds
                .iter()
                .map(|&s| {
                    gen_matrix(&grid, |train, test| {
                        Ok(selected
                            .iter()
                            .find(|r| r.seed == s && r.n_docs_train == train && r.n_docs_test == test)
                            .map(|r| r.perplexity))
                    })
                })
                .collect::<commer_core::Result<Vec<GenMatrix>>>()?;
            let med = GenMatrix::median_of(&mats)?;
            dir.write("matrix.csv", &med.csv_bytes()?)?;
            println!("generalization matrix over {grid:?} from {} seeds", seeds.len());
        }
    }
    if kind != ReportKind::Tradeoff && selected.is_empty() {
        bail!("no {method} results at m={m}");
    }
    Ok(())
}
