use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context as _};
use serde::Serialize;

use bugpilot::buggen::{changed_files, describe_bug, failing_section, run_campaign, Strategy};
use bugpilot::config::PipelineConfig;
use bugpilot::dataset::{corpus_stats_with, validate, BugRecord, Dataset, DatasetStore, Manifest};
use bugpilot::model_client::default_tokenizer;
use bugpilot::sandbox::{DockerRuntime, ResourceLimits, SandboxHandle};
use bugpilot::solver::{evaluate, read_attempts, select_for_sft, write_attempts, write_chat_jsonl, ATTEMPTS_FILE};
use bugpilot::taxonomy::{classify_all, derive_taxonomy, distribution, CategoryGuide};
use bugpilot::testkit::{run_tests, RepoProfile};
use bugpilot::toycorpus;

use crate::setup::{self, Services};
use crate::{usage, Cli, Command, TableFormat, CANCEL};

pub const CAMPAIGN_SUMMARY_FILE: &str = "campaign_summary.json";
pub const METRICS_FILE: &str = "metrics.json";

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let config = setup::layered_config(&cli)?;
    if cli.global.print_config {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(usage("no command given (see --help)"));
    };
    setup::print_run_manifest(command.name(), &config, setup::clock(&cli));
    match command {
        Command::Generate(a) => generate(&cli, &config, a),
        Command::Solve(a) => solve(&cli, &config, a),
        Command::Validate(_) => validate_cmd(&config),
        Command::Stats(a) => stats(&config, a.table),
        Command::Categorize(a) => categorize(&config, a),
        Command::Taxonomy(a) => taxonomy(&config, a),
        Command::ExportSft(a) => export_sft(&config, a),
        Command::Describe(a) => describe(&cli, &config, &a.instance),
        Command::Fixtures(a) => fixtures(&config, a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(c: &PipelineConfig) -> anyhow::Result<Dataset> {
    let ds = Dataset::load(&c.paths.dataset)?;
    tracing::info!(dir = %c.paths.dataset.display(), bugs = ds.bugs.len(), "loaded dataset");
    Ok(ds)
}

fn nonempty(ds: &Dataset) -> anyhow::Result<()> {
    if ds.bugs.is_empty() {
        bail!("dataset {} has no bugs", ds.dir.display());
    }
    Ok(())
}

/// The manifest's profile for the record's repository, or a default
/// profile on the record's image.
fn profile_for(ds: &Dataset) -> impl Fn(&BugRecord) -> RepoProfile + Sync + Send + '_ {
    |b| {
        ds.manifest
            .repo(&b.repo)
            .cloned()
            .unwrap_or_else(|| RepoProfile::new(&b.repo, &b.image_ref))
    }
}

fn interrupted() -> bool {
    CANCEL.load(Ordering::SeqCst)
}

fn generate(cli: &Cli, c: &PipelineConfig, a: &crate::GenerateArgs) -> anyhow::Result<()> {
    let repos = setup::load_repos(&a.repos)?;
    let services = Services::new(cli, c)?;
    let dir = &c.paths.dataset;
    let manifest = Manifest::new(c.fingerprint(), services.tokenizer.name(), repos.clone());
    let store = Mutex::new(DatasetStore::open_or_create(dir, manifest)?);
    let strategy = Strategy::builtin(a.strategy.into());
    let result = run_campaign(
        &services.env(),
        &repos,
        &strategy,
        c.buggen.attempts_per_repo,
        c.seed,
        &c.generation_config(),
        Some(&store),
        setup::mode(c),
    )?;
    drop(store);
    write_json(&dir.join(CAMPAIGN_SUMMARY_FILE), &result.summary)?;
    println!("{}", serde_json::to_string_pretty(&result.summary)?);
    if interrupted() {
        bail!("interrupted: {} attempts skipped", result.summary.skipped);
    }
    Ok(())
}

fn solve(cli: &Cli, c: &PipelineConfig, a: &crate::SolveArgs) -> anyhow::Result<()> {
    let ds = load_dataset(c)?;
    nonempty(&ds)?;
    let services = Services::new(cli, c)?;
    let eval = evaluate(&services.env(), &ds.bugs, profile_for(&ds), &c.solve_config(), setup::mode(c))?;
    write_attempts(&ds.dir, &eval.outcomes).with_context(|| format!("writing {}", ds.dir.join(ATTEMPTS_FILE).display()))?;
    let report = a.report.clone().unwrap_or_else(|| ds.dir.join(METRICS_FILE));
    write_json(&report, &eval.metrics)?;
    println!(
        "instances={} k={} pass@1avg={:.4} pass@k={:.4} pass^k={:.4} pass@short={:.4}",
        eval.metrics.instances,
        eval.metrics.k,
        eval.metrics.pass_at_1_avg,
        eval.metrics.pass_at_k,
        eval.metrics.pass_all_k,
        eval.metrics.pass_at_short
    );
    if eval.skipped > 0 {
        bail!("interrupted: {} attempts skipped", eval.skipped);
    }
    Ok(())
}

fn validate_cmd(c: &PipelineConfig) -> anyhow::Result<()> {
    let ds = load_dataset(c)?;
    let runtime = setup::runtime(c)?;
    let report = validate(&ds.bugs, profile_for(&ds), runtime.as_ref(), setup::mode(c));
    for r in &report.records {
        println!("{}", serde_json::to_string(r)?);
    }
    eprintln!("{} of {} records valid", report.valid, report.total);
    if !report.all_valid() {
        bail!("{} of {} records are invalid", report.total - report.valid, report.total);
    }
    Ok(())
}

fn stats(c: &PipelineConfig, table: TableFormat) -> anyhow::Result<()> {
    let ds = load_dataset(c)?;
    let tok = default_tokenizer();
    let s = corpus_stats_with(&ds.bugs, tok.as_ref(), setup::mode(c))?;
    match table {
        TableFormat::Markdown => print!("{}", s.to_markdown()),
        TableFormat::Json => println!("{}", serde_json::to_string_pretty(&s)?),
    }
    Ok(())
}

fn load_guide(spec: &str) -> anyhow::Result<CategoryGuide> {
    if spec == "default" {
        return Ok(CategoryGuide::builtin());
    }
    let text = std::fs::read_to_string(spec).map_err(|e| usage(format!("cannot read guide {spec}: {e}")))?;
    text.parse().map_err(|e| usage(format!("guide {spec}: {e}")))
}

fn categorize(c: &PipelineConfig, a: &crate::CategorizeArgs) -> anyhow::Result<()> {
    let guide = load_guide(&a.guide)?;
    let ds = load_dataset(c)?;
    nonempty(&ds)?;
    let tok = default_tokenizer();
    let backend = setup::backend(c, &tok)?;
    let labels = classify_all(backend.as_ref(), tok.as_ref(), &ds.bugs, &guide, &c.taxonomy, setup::mode(c));
    let out = a.out.clone().unwrap_or_else(|| ds.dir.join("labels.jsonl"));
    let mut text = String::new();
    for l in &labels {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    write_file(&out, text.as_bytes())?;
    let d = distribution(&labels);
    println!("{}", serde_json::to_string_pretty(&d)?);
    if d.unlabeled > 0 {
        tracing::warn!(unlabeled = d.unlabeled, "some bugs could not be labeled");
    }
    Ok(())
}

fn taxonomy(c: &PipelineConfig, a: &crate::TaxonomyArgs) -> anyhow::Result<()> {
    let ds = load_dataset(c)?;
    nonempty(&ds)?;
    let tok = default_tokenizer();
    let backend = setup::backend(c, &tok)?;
    let d = derive_taxonomy(
        backend.as_ref(),
        tok.as_ref(),
        &ds.bugs,
        c.taxonomy.fanout,
        &c.taxonomy,
        Some(&ds.dir),
        setup::mode(c),
    )?;
    let out = a.out.clone().unwrap_or_else(|| ds.dir.join("guide.txt"));
    write_file(&out, d.guide.to_string().as_bytes())?;
    eprintln!(
        "{} categories in {} rounds, {} model calls; guide written to {}",
        d.guide.entries.len(),
        d.rounds,
        d.calls,
        out.display()
    );
    Ok(())
}

fn export_sft(c: &PipelineConfig, a: &crate::ExportSftArgs) -> anyhow::Result<()> {
    let dir = &c.paths.dataset;
    let attempts = read_attempts(dir)
        .with_context(|| format!("reading {} (run `bugpilot solve` first)", dir.join(ATTEMPTS_FILE).display()))?;
    let tok = default_tokenizer();
    let examples = select_for_sft(&attempts, c.solver.sft_budget, tok.as_ref());
    let out = a.out.clone().unwrap_or_else(|| dir.join("sft.jsonl"));
    let mut buf = Vec::new();
    match a.format {
        crate::SftFormat::ChatJsonl => write_chat_jsonl(&mut buf, &examples)?,
    }
    write_file(&out, &buf)?;
    eprintln!(
        "{} of {} attempts exported to {}",
        examples.len(),
        attempts.len(),
        out.display()
    );
    Ok(())
}

/// Rebuilds the buggy state of one record, reruns its tests and asks the
/// model for a new problem statement. The dataset is not modified.
fn describe(cli: &Cli, c: &PipelineConfig, id: &str) -> anyhow::Result<()> {
    let ds = load_dataset(c)?;
    let bug = ds
        .bugs
        .iter()
        .find(|b| b.instance_id == id)
        .ok_or_else(|| anyhow!("no instance {id} in {}", ds.dir.display()))?;
    let profile = profile_for(&ds)(bug);
    let parser = profile.parser_profile()?;
    let services = Services::new(cli, c)?;
    let mut sb = SandboxHandle::create(services.runtime.as_ref(), &bug.image_ref, &ResourceLimits::default())?;
    sb.checkout(&bug.base_ref)?;
    sb.apply_patch(&bug.patch)?;
    let report = run_tests(&mut sb, &profile.test_command, &parser, profile.test_timeout_ms, "");
    sb.destroy();
    let report = report?;
    let statement = describe_bug(
        services.backend.as_ref(),
        services.tokenizer.as_ref(),
        &format!("{id}/describe"),
        failing_section(&report.raw_output),
        &changed_files(bug.patch.as_str()),
        &c.generation_config(),
    )?;
    println!("{}", serde_json::to_string_pretty(&statement)?);
    Ok(())
}

fn fixtures(c: &PipelineConfig, a: &crate::FixturesArgs) -> anyhow::Result<()> {
    let images: PathBuf = a.dir.join("images");
    for (image, head) in toycorpus::materialize_local(&images)? {
        eprintln!("{image} at {head}");
    }
    let scripts = a.dir.join("scripts");
    for (name, text) in toycorpus::SCRIPTS {
        write_file(&scripts.join(name), text.as_bytes())?;
    }
    let repos = setup::ReposFile {
        repo: toycorpus::repos().iter().map(|r| r.profile()).collect(),
    };
    write_file(&a.dir.join("repos.toml"), toml::to_string(&repos)?.as_bytes())?;
    if a.docker {
        let docker = DockerRuntime::new(&c.runtime.socket);
        for (image, id) in toycorpus::build_fixture_images(&docker)? {
            eprintln!("built {image} as {id}");
        }
    }
    println!("{}", a.dir.display());
    Ok(())
}
