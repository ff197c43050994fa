use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{hex_digest, ExperimentConfig};
use super::data::{generate_synthetic, DatasetFile, Split};
use crate::attack::{pgd_attack_batch, pick_target_label, AdversarialBatch, AttackMode};
use crate::dmfl::MainstayCache;
use crate::error::{Error, Result};
use crate::evalkit::{
    default_top_k, map_at_k, perceptibility, theoretical_map, EvalReport, RetrievalIndex,
};
use crate::hashmodel::{pretrain, CodeDatabase, CodeSetKind, HashCode, HashModel, LabelVector};
use crate::netcore::{LayerParams, NetworkParams};
use crate::oracle;
use crate::saat::adversarial_train;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Pretrain,
    Attack,
    Defend,
    Eval,
    OracleCheck,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Synth,
        Stage::Pretrain,
        Stage::Attack,
        Stage::Defend,
        Stage::Eval,
        Stage::OracleCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Pretrain => "pretrain",
            Stage::Attack => "attack",
            Stage::Defend => "defend",
            Stage::Eval => "eval",
            Stage::OracleCheck => "oracle-check",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }
}

/// Which model and inputs an [`EvalReport`] describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Condition {
    Clean,
    Attacked,
    DefendedClean,
    DefendedAttacked,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Clean,
        Condition::Attacked,
        Condition::DefendedClean,
        Condition::DefendedAttacked,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Attacked => "attacked",
            Condition::DefendedClean => "defended-clean",
            Condition::DefendedAttacked => "defended-attacked",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub key: String,
    pub ran: bool,
    /// Artifact directory, `None` for stages that write nothing.
    pub dir: Option<PathBuf>,
}

/// Everything one pipeline invocation produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config_hash: String,
    pub config_toml: String,
    pub stages: Vec<StageOutcome>,
    /// `(artifact, sha256)` for every code file the evaluated models used.
    pub code_hashes: Vec<(String, String)>,
    pub conditions: Vec<(Condition, EvalReport)>,
    /// Named scalars: theoretical MAP, t-MAP baseline, oracle case counts.
    pub summary: Vec<(String, f64)>,
}

impl RunReport {
    pub fn condition(&self, c: Condition) -> Option<&EvalReport> {
        self.conditions.iter().find(|(k, _)| *k == c).map(|(_, r)| r)
    }

    pub fn stage_dir(&self, stage: Stage) -> Option<&Path> {
        self.stages.iter().find(|s| s.stage == stage)?.dir.as_deref()
    }

    pub fn summary_value(&self, name: &str) -> Option<f64> {
        self.summary.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    /// Deterministic text form, free of paths and run status.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "config_hash = {}", self.config_hash).unwrap();
        for st in &self.stages {
            writeln!(s, "stage.{} = {}", st.stage.name(), st.key).unwrap();
        }
        for (name, h) in &self.code_hashes {
            writeln!(s, "sha256.{name} = {h}").unwrap();
        }
        for (name, v) in &self.summary {
            writeln!(s, "{name} = {v}").unwrap();
        }
        for (c, r) in &self.conditions {
            for line in r.to_text().lines() {
                writeln!(s, "{}.{line}", c.name()).unwrap();
            }
        }
        s.push_str("\n[config]\n");
        s.push_str(&self.config_toml);
        s
    }
}

struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn section(table: &toml::Table, prefixes: &[&str]) -> String {
    let sub: toml::Table = table
        .iter()
        .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    toml::to_string(&sub).expect("table serializes")
}

fn chain_key(stage: Stage, parents: &[&str], body: &str) -> String {
    let mut text = format!("{}\n", stage.name());
    for p in parents {
        text.push_str(p);
        text.push('\n');
    }
    text.push_str(body);
    hex_digest(text.as_bytes())
}

/// Content keys of each artifact-producing stage.
struct Keys {
    data: String,
    pretrain: String,
    attack: String,
    defend: String,
}

impl Keys {
    fn new(cfg: &ExperimentConfig) -> Self {
        let t = cfg.to_table();
        let data = chain_key(Stage::Synth, &[], &section(&t, &["version", "seed", "dataset_path", "synth_", "split_"]));
        let pretrain = chain_key(Stage::Pretrain, &[&data], &section(&t, &["model_", "pretrain_"]));
        let attack = chain_key(Stage::Attack, &[&pretrain], &section(&t, &["attack_"]));
        let defend = chain_key(Stage::Defend, &[&pretrain], &section(&t, &["defend_"]));
        Self {
            data,
            pretrain,
            attack,
            defend,
        }
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    root: &'a Path,
    keys: Keys,
    force: bool,
}

const DONE: &str = "done";

impl Ctx<'_> {
    fn dir(&self, stage: Stage, key: &str) -> PathBuf {
        self.root.join(format!("{}-{}", stage.name(), &key[..16]))
    }

    fn data_dir(&self) -> PathBuf {
        self.dir(Stage::Synth, &self.keys.data)
    }
    fn pretrain_dir(&self) -> PathBuf {
        self.dir(Stage::Pretrain, &self.keys.pretrain)
    }
    fn attack_dir(&self) -> PathBuf {
        self.dir(Stage::Attack, &self.keys.attack)
    }
    fn defend_dir(&self) -> PathBuf {
        self.dir(Stage::Defend, &self.keys.defend)
    }

    fn is_done(dir: &Path) -> bool {
        dir.join(DONE).is_file()
    }

    fn require(&self, stage: Stage, prerequisite: Stage, dir: &Path) -> Result<()> {
        if Self::is_done(dir) {
            Ok(())
        } else {
            Err(Error::MissingArtifact {
                stage: stage.name().into(),
                prerequisite: prerequisite.name().into(),
                path: dir.to_path_buf(),
            })
        }
    }

    /// Runs `body` in a fresh stage directory unless it is already complete.
    fn run_stage(&self, dir: &Path, key: &str, body: impl FnOnce(&Path) -> Result<()>) -> Result<bool> {
        if Self::is_done(dir) && !self.force {
            log::info!("{} is up to date", dir.display());
            return Ok(false);
        }
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::create_dir_all(dir)?;
        body(dir)?;
        fs::write(dir.join(DONE), format!("{key}\n"))?;
        Ok(true)
    }

    fn dataset(&self) -> Result<DatasetFile> {
        DatasetFile::load(self.data_dir().join("dataset.bin"))
    }

    fn model(dir: &Path, file: &str) -> Result<HashModel> {
        Ok(HashModel::new(NetworkParams::load(dir.join(file))?))
    }
}

fn synth_stage(ctx: &Ctx) -> Result<bool> {
    let cfg = ctx.cfg;
    ctx.run_stage(&ctx.data_dir(), &ctx.keys.data, |dir| {
        let data = if cfg.dataset_path.is_empty() {
            generate_synthetic(&cfg.synth_spec(), cfg.seed)?
        } else if cfg.dataset_path.ends_with(".csv") {
            DatasetFile::import_csv(&cfg.dataset_path, cfg.seed)?
        } else {
            DatasetFile::load(&cfg.dataset_path)?
        };
        for split in [Split::Train, Split::Query, Split::Database] {
            if data.indices(split).is_empty() {
                return Err(Error::InvalidConfig(format!("dataset has no {} samples", split.name())));
            }
        }
        data.save(dir.join("dataset.bin"))
    })
}

fn database_codes(model: &HashModel, data: &DatasetFile) -> Result<CodeDatabase> {
    let (x, y) = data.subset(Split::Database);
    CodeDatabase::new(model.hash_codes(&x)?, y)
}

fn pretrain_stage(ctx: &Ctx) -> Result<bool> {
    let cfg = ctx.cfg;
    ctx.run_stage(&ctx.pretrain_dir(), &ctx.keys.pretrain, |dir| {
        let data = ctx.dataset()?;
        let (x, y) = data.subset(Split::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut net = NetworkParams::init(data.dim(), &cfg.model_hidden, cfg.model_bits, &mut rng)?;
        if cfg.model_standardize {
            net = net.prepend(LayerParams::standardizer(&x)?)?;
        }
        let mut model = HashModel::new(net);
        let log = pretrain(&mut model, &x, &y, &cfg.pretrain_config())?;
        let mut text = String::new();
        for (e, l) in log.epoch_losses.iter().enumerate() {
            writeln!(text, "{e} {l}").unwrap();
        }
        fs::write(dir.join("pretrain.log"), text)?;
        model.net().save(dir.join("model.net"))?;
        database_codes(&model, &data)?.save(dir.join("db.cdb"))
    })
}

/// Guide codes and the labels retrieval is judged against, one per query.
struct Guides {
    codes: Vec<HashCode>,
    relevance: Vec<LabelVector>,
}

fn target_labels(cfg: &ExperimentConfig, qy: &[LabelVector], pool: &[LabelVector]) -> Result<Vec<LabelVector>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a46_e7ed);
    qy.iter().map(|y| pick_target_label(y, pool, &mut rng)).collect()
}

fn guides_for(mode: AttackMode, qy: &[LabelVector], targets: Option<&[LabelVector]>, db: &CodeDatabase) -> Result<(Guides, MainstayCache)> {
    let relevance = match mode {
        AttackMode::NonTargeted => qy.to_vec(),
        AttackMode::Targeted => targets.expect("targets for targeted mode").to_vec(),
    };
    let mut cache = MainstayCache::new();
    cache.populate(&relevance, &db.codes, &db.labels)?;
    let codes = relevance
        .iter()
        .map(|l| cache.get(l).expect("populated").code.clone())
        .collect();
    Ok((Guides { codes, relevance }, cache))
}

fn attack_queries(ctx: &Ctx, model: &HashModel, data: &DatasetFile, guides: &Guides) -> Result<AdversarialBatch> {
    let (qx, _) = data.subset(Split::Query);
    let origins = data.indices(Split::Query);
    let adv = pgd_attack_batch(model, &qx, &origins, &guides.codes, &ctx.cfg.attack_config()?)?;
    Ok(AdversarialBatch::from_examples(&adv))
}

fn attack_stage(ctx: &Ctx) -> Result<bool> {
    ctx.require(Stage::Attack, Stage::Pretrain, &ctx.pretrain_dir())?;
    let cfg = ctx.cfg;
    ctx.run_stage(&ctx.attack_dir(), &ctx.keys.attack, |dir| {
        let data = ctx.dataset()?;
        let model = Ctx::model(&ctx.pretrain_dir(), "model.net")?;
        let db = CodeDatabase::load(ctx.pretrain_dir().join("db.cdb"))?;
        let mode = cfg.attack_config()?.mode;
        let (_, qy) = data.subset(Split::Query);
        let targets = match mode {
            AttackMode::Targeted => Some(target_labels(cfg, &qy, &db.labels)?),
            AttackMode::NonTargeted => None,
        };
        let (guides, cache) = guides_for(mode, &qy, targets.as_deref(), &db)?;
        attack_queries(ctx, &model, &data, &guides)?.save(dir.join("adv.bin"))?;
        let mut g = CodeDatabase::new(guides.codes, guides.relevance)?;
        g.kind = CodeSetKind::Database;
        g.save(dir.join("guides.cdb"))?;
        cache.to_code_set()?.save(dir.join("mainstays.cdb"))
    })
}

fn defend_stage(ctx: &Ctx) -> Result<bool> {
    ctx.require(Stage::Defend, Stage::Pretrain, &ctx.pretrain_dir())?;
    let cfg = ctx.cfg;
    ctx.run_stage(&ctx.defend_dir(), &ctx.keys.defend, |dir| {
        let data = ctx.dataset()?;
        let mut model = Ctx::model(&ctx.pretrain_dir(), "model.net")?;
        let (x, y) = data.subset(Split::Train);
        let ckpt = dir.join("checkpoints");
        fs::create_dir_all(&ckpt)?;
        let log = adversarial_train(&mut model, &x, &y, &cfg.train_config(), Some(&ckpt))?;
        fs::write(dir.join("train.jsonl"), log.to_json_lines())?;
        model.net().save(dir.join("robust.net"))?;
        database_codes(&model, &data)?.save(dir.join("db.cdb"))
    })
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(hex_digest(&fs::read(path)?))
}

struct EvalOutput {
    conditions: Vec<(Condition, EvalReport)>,
    summary: Vec<(String, f64)>,
    code_hashes: Vec<(String, String)>,
}

fn evaluate(ctx: &Ctx, with_attack: bool, with_defense: bool) -> Result<EvalOutput> {
    let cfg = ctx.cfg;
    let data = ctx.dataset()?;
    let (qx, qy) = data.subset(Split::Query);
    let model = Ctx::model(&ctx.pretrain_dir(), "model.net")?;
    let db_path = ctx.pretrain_dir().join("db.cdb");
    let db = CodeDatabase::load(&db_path)?;
    let top_k = if cfg.eval_top_k == 0 { default_top_k(db.len()) } else { cfg.eval_top_k };
    let grid = &cfg.eval_n_grid;
    let mut out = EvalOutput {
        conditions: Vec::new(),
        summary: Vec::new(),
        code_hashes: vec![("pretrain.db".into(), file_hash(&db_path)?)],
    };
    let index = RetrievalIndex::new(&db.codes, db.labels.clone())?;
    let clean_codes = model.hash_codes(&qx)?;
    out.conditions.push((Condition::Clean, EvalReport::evaluate(&clean_codes, &qy, &index, top_k, grid)?));

    let attack = cfg.attack_config()?;
    let mut targets = None;
    if with_attack {
        let adir = ctx.attack_dir();
        let adv = AdversarialBatch::load(adir.join("adv.bin"))?;
        let guides_path = adir.join("guides.cdb");
        let guides = CodeDatabase::load(&guides_path)?;
        out.code_hashes.push(("attack.guides".into(), file_hash(&guides_path)?));
        let adv_codes = model.hash_codes(&adv.rows)?;
        let mut r = EvalReport::evaluate(&adv_codes, &qy, &index, top_k, grid)?;
        r.perceptibility = Some(perceptibility(&qx, &adv.rows)?);
        if attack.mode == AttackMode::Targeted {
            r.t_map = Some(map_at_k(&adv_codes, &guides.labels, &index, top_k)?);
            out.summary.push(("t_map_baseline".into(), map_at_k(&clean_codes, &guides.labels, &index, top_k)?));
            targets = Some(guides.labels.clone());
        }
        out.summary.push((
            "theoretical_map".into(),
            theoretical_map(&guides.codes, &guides.labels, &index, top_k, attack.mode)?,
        ));
        out.conditions.push((Condition::Attacked, r));
    }

    if with_defense {
        let ddir = ctx.defend_dir();
        let robust = Ctx::model(&ddir, "robust.net")?;
        let rdb_path = ddir.join("db.cdb");
        let rdb = CodeDatabase::load(&rdb_path)?;
        out.code_hashes.push(("defend.db".into(), file_hash(&rdb_path)?));
        let rindex = RetrievalIndex::new(&rdb.codes, rdb.labels.clone())?;
        let rclean = robust.hash_codes(&qx)?;
        out.conditions.push((Condition::DefendedClean, EvalReport::evaluate(&rclean, &qy, &rindex, top_k, grid)?));
        if with_attack {
            let (guides, _) = guides_for(attack.mode, &qy, targets.as_deref(), &rdb)?;
            let adv = attack_queries(ctx, &robust, &data, &guides)?;
            let adv_codes = robust.hash_codes(&adv.rows)?;
            let mut r = EvalReport::evaluate(&adv_codes, &qy, &rindex, top_k, grid)?;
            r.perceptibility = Some(perceptibility(&qx, &adv.rows)?);
            if attack.mode == AttackMode::Targeted {
                r.t_map = Some(map_at_k(&adv_codes, &guides.relevance, &rindex, top_k)?);
            }
            out.conditions.push((Condition::DefendedAttacked, r));
        }
    }
    Ok(out)
}

fn write_summary(dir: &Path, out: &EvalOutput) -> Result<()> {
    let mut s = String::new();
    for (k, v) in &out.summary {
        writeln!(s, "{k} = {v}").unwrap();
    }
    for (k, h) in &out.code_hashes {
        writeln!(s, "sha256.{k} = {h}").unwrap();
    }
    fs::write(dir.join("summary.txt"), s)?;
    for (c, r) in &out.conditions {
        r.write_to_dir(dir, c.name())?;
    }
    Ok(())
}

fn read_summary(dir: &Path) -> Result<EvalOutput> {
    let mut out = EvalOutput {
        conditions: Vec::new(),
        summary: Vec::new(),
        code_hashes: Vec::new(),
    };
    let text = fs::read_to_string(dir.join("summary.txt"))?;
    for (i, line) in text.lines().enumerate() {
        let (k, v) = line.split_once(" = ").ok_or(Error::Parse {
            line: i + 1,
            message: "expected `key = value`".into(),
        })?;
        if let Some(name) = k.strip_prefix("sha256.") {
            out.code_hashes.push((name.into(), v.into()));
        } else {
            let v = v.parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad number `{v}`"),
            })?;
            out.summary.push((k.into(), v));
        }
    }
    for c in Condition::ALL {
        let p = dir.join(format!("{}.txt", c.name()));
        if p.is_file() {
            out.conditions.push((c, EvalReport::from_text(&fs::read_to_string(p)?)?));
        }
    }
    Ok(out)
}

/// Runs `stages` in canonical order against the artifact tree in `out_dir`.
///
/// Every artifact-producing stage writes into a directory named after a
/// hash of the config keys it depends on plus its upstream stage hashes, so
/// a completed stage is skipped unless `force` is set. Stages that need the
/// dataset materialize it first.
pub fn run_pipeline(cfg: &ExperimentConfig, stages: &[Stage], out_dir: &Path, force: bool) -> Result<RunReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let _lock = LockGuard::acquire(out_dir)?;
    let ctx = Ctx {
        cfg,
        root: out_dir,
        keys: Keys::new(cfg),
        force,
    };
    let mut plan: Vec<Stage> = stages.to_vec();
    plan.sort();
    plan.dedup();
    let mut report = RunReport {
        config_hash: cfg.hash(),
        config_toml: cfg.to_toml(),
        stages: Vec::new(),
        code_hashes: Vec::new(),
        conditions: Vec::new(),
        summary: Vec::new(),
    };
    let needs_data = plan.iter().any(|s| matches!(s, Stage::Synth | Stage::Pretrain));
    if needs_data {
        let ran = synth_stage(&ctx)?;
        report.stages.push(StageOutcome {
            stage: Stage::Synth,
            key: ctx.keys.data.clone(),
            ran,
            dir: Some(ctx.data_dir()),
        });
    }
    for stage in plan {
        let (key, ran, dir) = match stage {
            Stage::Synth => continue,
            Stage::Pretrain => (ctx.keys.pretrain.clone(), pretrain_stage(&ctx)?, Some(ctx.pretrain_dir())),
            Stage::Attack => (ctx.keys.attack.clone(), attack_stage(&ctx)?, Some(ctx.attack_dir())),
            Stage::Defend => (ctx.keys.defend.clone(), defend_stage(&ctx)?, Some(ctx.defend_dir())),
            Stage::Eval => {
                ctx.require(Stage::Eval, Stage::Pretrain, &ctx.pretrain_dir())?;
                let with_attack = Ctx::is_done(&ctx.attack_dir());
                let with_defense = Ctx::is_done(&ctx.defend_dir());
                let mut parents = vec![ctx.keys.pretrain.as_str()];
                if with_attack {
                    parents.push(&ctx.keys.attack);
                }
                if with_defense {
                    parents.push(&ctx.keys.defend);
                }
                let key = chain_key(Stage::Eval, &parents, &section(&cfg.to_table(), &["eval_"]));
                let dir = ctx.dir(Stage::Eval, &key);
                let ran = ctx.run_stage(&dir, &key, |dir| write_summary(dir, &evaluate(&ctx, with_attack, with_defense)?))?;
                let out = read_summary(&dir)?;
                report.conditions = out.conditions;
                report.summary.extend(out.summary);
                report.code_hashes = out.code_hashes;
                (key, ran, Some(dir))
            }
            Stage::OracleCheck => {
                let m = oracle::mainstay_optimality_suite(1000, cfg.seed).into_result("mainstay optimality")?;
                let g = oracle::gradient_suite(100, cfg.seed, 1e-4).into_result("gradient check")?;
                report.summary.push(("oracle.mainstay_cases".into(), m as f64));
                report.summary.push(("oracle.gradient_cases".into(), g as f64));
                (String::from("-"), true, None)
            }
        };
        report.stages.push(StageOutcome { stage, key, ran, dir });
    }
    fs::write(out_dir.join("run-report.txt"), report.to_text())?;
    Ok(report)
}

impl Ctx<'_> {
    #[cfg(test)]
    fn for_test<'a>(cfg: &'a ExperimentConfig, root: &'a Path) -> Ctx<'a> {
        Ctx {
            cfg,
            root,
            keys: Keys::new(cfg),
            force: false,
        }
    }
}
