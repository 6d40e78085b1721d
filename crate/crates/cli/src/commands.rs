use std::fs;
use std::path::{Path, PathBuf};

use amem4rec::agent::{Backend, TemplateSet};
use amem4rec::dataset::{
    build_eval_instances, filter_cold_start, load_interactions, select_cohort, DataSource, Dataset,
    EvalInstance, UserHistory,
};
use amem4rec::eval::{evaluate, export_embeddings, run_ablation_suite, with_jobs, PoolStats};
use amem4rec::memory::MemoryPool;
use amem4rec::pipeline::{Pipeline, TrainOptions, Variant};
use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use crate::config::{ConfigFile, EvalCohort};
use crate::{Cli, Command, FormatArg, GlobalArgs, InspectCommand, ProviderArg, VariantArg};

const POOL_FILE: &str = "pool.jsonl";
const CHECKPOINT_DIR: &str = "checkpoint";

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoSimilarityValidator => Variant::NoSimilarityValidator,
            VariantArg::NoSemanticValidator => Variant::NoSemanticValidator,
            VariantArg::NoEvolution => Variant::NoEvolution,
        }
    }
}

/// Writes through a temporary file so a reader never sees a partial artifact.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn save_pool(pool: &MemoryPool, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let tmp = path.with_extension("partial");
    pool.save(&tmp)?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

/// Resolved configuration plus everything derived from it.
struct Ctx {
    config: ConfigFile,
    templates: TemplateSet,
    hash: String,
}

impl Ctx {
    fn new(
        global: &GlobalArgs,
        ablation: Option<VariantArg>,
        ks: Option<Vec<usize>>,
    ) -> Result<Self> {
        let mut config = match &global.config {
            Some(path) => ConfigFile::load(path)?,
            None => ConfigFile::default(),
        };
        if let Some(seed) = global.seed {
            config.run.seed = seed;
        }
        if let Some(p) = global.provider {
            config.run.provider.backend = match p {
                ProviderArg::Mock => Backend::Mock,
                ProviderArg::Http => Backend::Http,
            };
        }
        if let Some(dir) = &global.out_dir {
            config.out_dir = dir.clone();
        }
        if global.jobs.is_some() {
            config.jobs = global.jobs;
        }
        if let Some(path) = &global.data {
            config.dataset = Some(DataSource::Jsonl { path: path.clone() });
        }
        if let Some(v) = ablation {
            config.run.ablations = Variant::from(v).ablations();
        }
        if let Some(ks) = ks {
            if ks.is_empty() || ks.contains(&0) {
                bail!("--k needs positive cutoffs");
            }
            config.ks = ks;
        }
        config.run.validate()?;
        let templates = config.templates()?;
        let hash = config.config_hash(&templates);
        Ok(Self {
            config,
            templates,
            hash,
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    /// Echoes the resolved configuration next to the artifacts.
    fn echo_config(&self) -> Result<()> {
        #[derive(Serialize)]
        struct Resolved<'a> {
            config_hash: &'a str,
            #[serde(flatten)]
            config: &'a ConfigFile,
        }
        write_json(
            &self.out("config.json"),
            &Resolved {
                config_hash: &self.hash,
                config: &self.config,
            },
        )
    }

    fn pipeline(&self) -> Result<Pipeline> {
        Ok(
            Pipeline::from_config(self.config.run.clone(), self.templates.clone())?
                .with_config_hash(self.hash.clone()),
        )
    }

    fn dataset(&self) -> Result<Dataset> {
        let source = self.config.dataset.as_ref().ok_or_else(|| {
            anyhow!("no dataset configured; set `dataset` in the config or pass --data")
        })?;
        let ds = load_interactions(source)?;
        let r = &ds.report;
        eprintln!(
            "loaded {} users, {} items ({} records kept, {} dropped, {} unparseable)",
            ds.users.len(),
            ds.catalog.len(),
            r.records_kept,
            r.dropped_missing_fields,
            r.unparseable_lines.len()
        );
        Ok(ds)
    }

    /// Evaluation instances for the sampled cohort.
    fn cohort_instances(&self, ds: &Dataset) -> Result<Vec<EvalInstance>> {
        let c = &self.config.cohort;
        let cohort = select_cohort(
            ds.histories(),
            c.min_interactions,
            c.sample_size,
            self.config.run.seed,
        );
        if cohort.is_empty() {
            bail!("no user has at least {} interactions", c.min_interactions);
        }
        Ok(build_eval_instances(
            cohort,
            &ds.items(),
            self.config.candidates,
            self.config.run.seed,
        )?)
    }

    /// The users whose histories train the pool.
    fn training_users(&self, ds: &Dataset) -> Result<Vec<UserHistory>> {
        let instances = self.cohort_instances(ds)?;
        Ok(match self.config.cohort.eval_cohort {
            EvalCohort::Shared => instances.iter().map(EvalInstance::train_user).collect(),
            EvalCohort::Disjoint => {
                let held: std::collections::HashSet<&str> =
                    instances.iter().map(|i| i.user_id.as_str()).collect();
                let rest: Vec<&UserHistory> = ds
                    .histories()
                    .filter(|u| !held.contains(u.user_id.as_str()))
                    .collect();
                let c = &self.config.cohort;
                select_cohort(
                    rest,
                    c.min_interactions,
                    c.sample_size,
                    self.config.run.seed.wrapping_add(1),
                )
                .into_iter()
                .cloned()
                .collect()
            }
        })
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            format,
            input,
            behaviors,
            news,
            output,
        } => ingest(format, input, behaviors, news, &output),
        Command::Train {
            resume,
            ablation,
            stop_after_users,
        } => train(
            &Ctx::new(&cli.global, ablation, None)?,
            resume,
            stop_after_users,
        ),
        Command::Eval {
            pool,
            no_memory,
            cold_start,
            k,
            ablation,
            output,
        } => eval(
            &Ctx::new(&cli.global, ablation, k)?,
            pool,
            no_memory,
            cold_start,
            output,
        ),
        Command::Ablate { variants } => ablate(&Ctx::new(&cli.global, None, None)?, variants),
        Command::Inspect { pool, what } => {
            let ctx = Ctx::new(&cli.global, None, None)?;
            inspect(&pool.unwrap_or_else(|| ctx.out(POOL_FILE)), what)
        }
    }
}

fn ingest(
    format: FormatArg,
    input: Option<PathBuf>,
    behaviors: Option<PathBuf>,
    news: Option<PathBuf>,
    output: &Path,
) -> Result<()> {
    let source = match format {
        FormatArg::Jsonl => DataSource::Jsonl {
            path: input.ok_or_else(|| anyhow!("--input is required for jsonl"))?,
        },
        FormatArg::MindTsv => DataSource::MindTsv {
            behaviors: behaviors.ok_or_else(|| anyhow!("--behaviors is required for mind_tsv"))?,
            news: news.ok_or_else(|| anyhow!("--news is required for mind_tsv"))?,
        },
    };
    let ds = load_interactions(&source)?;
    let tmp = output.with_extension("partial");
    ds.write_jsonl(&tmp)?;
    fs::rename(&tmp, output).with_context(|| format!("writing {}", output.display()))?;
    let r = &ds.report;
    println!(
        "records read {}, kept {}, dropped (missing title/category) {}, unresolved items {}, unparseable lines {}",
        r.records_read,
        r.records_kept,
        r.dropped_missing_fields,
        r.unresolved_items,
        r.unparseable_lines.len()
    );
    println!(
        "{} users, {} items -> {}",
        ds.users.len(),
        ds.catalog.len(),
        output.display()
    );
    Ok(())
}

fn train(ctx: &Ctx, resume: bool, stop_after_users: Option<usize>) -> Result<()> {
    let ds = ctx.dataset()?;
    let users = ctx.training_users(&ds)?;
    ctx.echo_config()?;
    let pipeline = ctx.pipeline()?;
    let options = TrainOptions {
        checkpoint_dir: Some(ctx.out(CHECKPOINT_DIR)),
        checkpoint_every: ctx.config.checkpoint_every,
        resume,
        stop_after_users,
        keep_traces: true,
    };
    let mut pool = MemoryPool::new();
    let result = pipeline.train(&mut pool, &users, &options);
    pipeline
        .gateway()
        .write_audit(ctx.out("audit_train.jsonl"))?;
    let report = result
        .context("training failed; rerun with --resume to continue from the last checkpoint")?;

    let mut traces = String::new();
    for t in &report.traces {
        traces.push_str(&serde_json::to_string(t)?);
        traces.push('\n');
    }
    write_atomic(&ctx.out("traces.jsonl"), traces.as_bytes())?;
    write_json(&ctx.out("training_report.json"), &report)?;

    if let Some(n) = stop_after_users.filter(|n| *n < users.len()) {
        bail!(
            "stopped after {n} of {} users; checkpoint in {}",
            users.len(),
            ctx.out(CHECKPOINT_DIR).display()
        );
    }
    let pool_path = ctx.out(POOL_FILE);
    save_pool(&pool, &pool_path)?;
    let s = &report.summary;
    println!(
        "trained on {} users, {} windows: {} inserts, {} evolutions, {} failed windows",
        s.users, s.windows, s.inserts, s.replaces, s.failed_windows
    );
    println!("pool of {} memories -> {}", pool.len(), pool_path.display());
    Ok(())
}

fn eval(
    ctx: &Ctx,
    pool_path: Option<PathBuf>,
    no_memory: bool,
    cold_start: bool,
    output: Option<PathBuf>,
) -> Result<()> {
    let ds = ctx.dataset()?;
    let pool = if no_memory {
        MemoryPool::new()
    } else {
        let path = pool_path.unwrap_or_else(|| ctx.out(POOL_FILE));
        if !path.exists() {
            bail!(
                "no pool at {}; run `train` first or pass --no-memory",
                path.display()
            );
        }
        let pool = MemoryPool::load(&path)?;
        if pool.config_hash().is_some_and(|h| h != ctx.hash) {
            log::warn!("pool was trained under a different configuration");
        }
        pool
    };
    let instances = if cold_start {
        let users = filter_cold_start(ds.histories(), 2, 3);
        if users.is_empty() {
            bail!("no user has 2 or 3 interactions");
        }
        build_eval_instances(
            users,
            &ds.items(),
            ctx.config.candidates,
            ctx.config.run.seed,
        )?
    } else {
        ctx.cohort_instances(&ds)?
    };
    ctx.echo_config()?;
    let pipeline = ctx.pipeline()?;
    let report = with_jobs(ctx.config.jobs, || {
        evaluate(&pipeline, &pool, &instances, &ctx.config.ks)
    })?;
    pipeline
        .gateway()
        .write_audit(ctx.out("audit_eval.jsonl"))?;
    let path = output.unwrap_or_else(|| ctx.out("metrics.json"));
    write_json(&path, &report)?;
    print!("{}", report.to_table());
    println!("report -> {}", path.display());
    Ok(())
}

fn ablate(ctx: &Ctx, variants: Option<Vec<VariantArg>>) -> Result<()> {
    let variants: Vec<Variant> = match variants {
        Some(v) => v.into_iter().map(Variant::from).collect(),
        None => Variant::ALL.to_vec(),
    };
    let ds = ctx.dataset()?;
    let instances = ctx.cohort_instances(&ds)?;
    let users = ctx.training_users(&ds)?;
    ctx.echo_config()?;
    let report = with_jobs(ctx.config.jobs, || {
        run_ablation_suite(&variants, &users, &instances, &ctx.config.ks, |variant| {
            let mut config = ctx.config.clone();
            config.run.ablations = variant.ablations();
            let hash = config.config_hash(&ctx.templates);
            Ok(Pipeline::from_config(config.run, ctx.templates.clone())?.with_config_hash(hash))
        })
    })?;
    for run in &report.variants {
        if let Some(pool) = &run.final_pool {
            save_pool(
                pool,
                &ctx.out(&format!("ablation/{}/{POOL_FILE}", run.variant.name())),
            )?;
        }
    }
    let path = ctx.out("ablation.json");
    write_json(&path, &report)?;
    print!("{}", report.to_table());
    println!("report -> {}", path.display());
    Ok(())
}

fn inspect(pool_path: &Path, what: InspectCommand) -> Result<()> {
    let pool = MemoryPool::load(pool_path)?;
    match what {
        InspectCommand::Stats { json } => {
            let stats = PoolStats::of(&pool);
            if json {
                println!("{}", serde_json::to_string_pretty(&stats)?);
                return Ok(());
            }
            println!("memories          {}", stats.size);
            println!(
                "dimension         {}",
                pool.dim().map_or("-".into(), |d| d.to_string())
            );
            println!("total evolutions  {}", stats.total_evolutions);
            println!("max evolutions    {}", stats.max_evolution_count);
            println!("config hash       {}", pool.config_hash().unwrap_or("-"));
            println!("evolution count histogram:");
            for b in &stats.histogram {
                println!("  {:>6}  {}", b.label(), b.count);
            }
        }
        InspectCommand::Show { id } => {
            let entry = pool.get(id).ok_or_else(|| {
                anyhow!(
                    "no memory with id {id} (pool has ids 0..{})",
                    pool.next_id()
                )
            })?;
            println!("id                    {}", entry.id);
            println!(
                "behavior explanation  {}",
                entry.pattern.behavior_explanation()
            );
            println!(
                "pattern description   {}",
                entry.pattern.pattern_description()
            );
            println!("evolution count       {}", entry.evolution_count);
            println!(
                "source                user {} window {}",
                entry.provenance.source_user, entry.provenance.source_window_index
            );
            println!(
                "steps                 created {} updated {}",
                entry.created_step, entry.updated_step
            );
        }
        InspectCommand::ExportEmbeddings { path } => {
            let tmp = path.with_extension("partial");
            export_embeddings(&pool, &tmp)?;
            fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
            println!("{} embeddings -> {}", pool.len(), path.display());
        }
    }
    Ok(())
}
