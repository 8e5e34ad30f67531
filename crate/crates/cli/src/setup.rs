use std::path::{Path, PathBuf};

use anyhow::Context as _;
use serde::{Deserialize, Serialize};

use bugpilot::buggen::{Clock, Env};
use bugpilot::config::{BackendKind, PipelineConfig, RuntimeKind};
use bugpilot::model_client::{default_tokenizer, LiveBackend, ModelBackend, ReplayBackend, SharedTokenizer};
use bugpilot::parallel::Parallelism;
use bugpilot::sandbox::{DockerRuntime, LocalRuntime, Runtime};
use bugpilot::testkit::RepoProfile;
use bugpilot::toycorpus;

use crate::{usage, Cli, Command, CANCEL};

/// Defaults, then the config file, then flags, then the environment.
pub fn layered_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let g = &cli.global;
    let mut c = PipelineConfig::load(g.config.as_deref())?;
    if let Some(b) = g.backend {
        c.backend.kind = b.into();
    }
    if let Some(s) = &g.script {
        c.backend.script = Some(s.clone());
    }
    if let Some(m) = &g.model {
        c.backend.model = m.clone();
    }
    if let Some(u) = &g.base_url {
        c.backend.base_url = u.clone();
    }
    if let Some(r) = g.runtime {
        c.runtime.kind = r.into();
    }
    if let Some(s) = &g.socket {
        c.runtime.socket = s.clone();
    }
    if let Some(d) = &g.images_dir {
        c.runtime.images_dir = d.clone();
    }
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(w) = g.workers {
        c.parallelism = w;
    }
    match &cli.command {
        Some(Command::Generate(a)) => {
            set_dataset(&mut c, a.out.as_ref());
            if let Some(n) = a.attempts {
                c.buggen.attempts_per_repo = n;
            }
            if let Some(n) = a.max_rounds {
                c.buggen.max_rounds = n;
            }
            if let Some(n) = a.max_steps {
                c.episode.max_steps = n;
            }
        }
        Some(Command::Solve(a)) => {
            set_dataset(&mut c, a.dataset.dataset.as_ref());
            match (a.k, &a.seeds) {
                (Some(k), None) => {
                    c.solver.k = k;
                    c.solver.seeds = (1..=k as u64).collect();
                }
                (k, Some(seeds)) => {
                    c.solver.k = k.unwrap_or(seeds.len());
                    c.solver.seeds = seeds.clone();
                }
                (None, None) => {}
            }
            if let Some(s) = a.short_by {
                c.solver.short_by = s.into();
            }
            if let Some(n) = a.max_steps {
                c.episode.max_steps = n;
            }
        }
        Some(Command::Validate(a)) => set_dataset(&mut c, a.dataset.as_ref()),
        Some(Command::Stats(a)) => set_dataset(&mut c, a.dataset.dataset.as_ref()),
        Some(Command::Categorize(a)) => set_dataset(&mut c, a.dataset.dataset.as_ref()),
        Some(Command::Taxonomy(a)) => {
            set_dataset(&mut c, a.dataset.dataset.as_ref());
            if let Some(f) = a.fanout {
                c.taxonomy.fanout = f;
            }
        }
        Some(Command::ExportSft(a)) => {
            set_dataset(&mut c, a.dataset.dataset.as_ref());
            if let Some(b) = a.budget {
                c.solver.sft_budget = b;
            }
        }
        Some(Command::Describe(a)) => set_dataset(&mut c, a.dataset.dataset.as_ref()),
        Some(Command::Fixtures(_)) | None => {}
    }
    c.apply_env(|k| std::env::var(k).ok())?;
    c.validate()?;
    Ok(c)
}

fn set_dataset(c: &mut PipelineConfig, dir: Option<&PathBuf>) {
    if let Some(d) = dir {
        c.paths.dataset = d.clone();
    }
}

pub fn mode(c: &PipelineConfig) -> Parallelism {
    if c.parallelism == 1 {
        Parallelism::Sequential
    } else {
        Parallelism::Workers(c.parallelism)
    }
}

pub fn clock(cli: &Cli) -> Clock {
    if cli.global.freeze_time {
        Clock::frozen_default()
    } else {
        Clock::System
    }
}

pub fn runtime(c: &PipelineConfig) -> anyhow::Result<Box<dyn Runtime>> {
    Ok(match c.runtime.kind {
        RuntimeKind::Docker => Box::new(DockerRuntime::new(&c.runtime.socket)),
        RuntimeKind::Local => {
            let dir = &c.runtime.images_dir;
            if !dir.is_dir() {
                return Err(usage(format!(
                    "local image directory {} does not exist (create it with `bugpilot fixtures`)",
                    dir.display()
                )));
            }
            Box::new(LocalRuntime::new(dir))
        }
    })
}

pub fn backend(c: &PipelineConfig, tokenizer: &SharedTokenizer) -> anyhow::Result<Box<dyn ModelBackend>> {
    Ok(match c.backend.kind {
        BackendKind::Replay => {
            let path = c
                .backend
                .script
                .as_ref()
                .ok_or_else(|| usage("the replay backend needs --script or backend.script"))?;
            Box::new(ReplayBackend::from_file(path, tokenizer.clone(), c.backend.context_window)?)
        }
        BackendKind::Live => {
            let key = std::env::var(&c.backend.api_key_env).ok();
            if key.is_none() {
                tracing::info!(var = %c.backend.api_key_env, "no API key set, sending unauthenticated requests");
            }
            Box::new(LiveBackend::new(c.backend.live_config(key), tokenizer.clone()))
        }
    })
}

/// Collaborators shared by the model-driven commands.
pub struct Services {
    pub runtime: Box<dyn Runtime>,
    pub backend: Box<dyn ModelBackend>,
    pub tokenizer: SharedTokenizer,
    pub clock: Clock,
}

impl Services {
    pub fn new(cli: &Cli, c: &PipelineConfig) -> anyhow::Result<Self> {
        let tokenizer = default_tokenizer();
        Ok(Self {
            runtime: runtime(c)?,
            backend: backend(c, &tokenizer)?,
            tokenizer,
            clock: clock(cli),
        })
    }

    pub fn env(&self) -> Env<'_> {
        Env {
            runtime: self.runtime.as_ref(),
            backend: self.backend.as_ref(),
            tokenizer: &self.tokenizer,
            clock: self.clock,
            cancel: Some(&CANCEL),
        }
    }
}

/// On-disk list of seed repositories.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReposFile {
    pub repo: Vec<RepoProfile>,
}

/// `spec` is a TOML file of `[[repo]]` tables or a comma-separated list
/// of bundled fixture names.
pub fn load_repos(spec: &str) -> anyhow::Result<Vec<RepoProfile>> {
    let path = Path::new(spec);
    let repos = if path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: ReposFile =
            toml::from_str(&text).map_err(|e| usage(format!("invalid repos file {}: {e}", path.display())))?;
        file.repo
    } else {
        spec.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|name| {
                toycorpus::repo(name).map(|r| r.profile()).ok_or_else(|| {
                    let known: Vec<&str> = toycorpus::repos().iter().map(|r| r.name).collect();
                    usage(format!(
                        "--repos {name:?} is neither a file nor a bundled fixture ({})",
                        known.join(", ")
                    ))
                })
            })
            .collect::<anyhow::Result<_>>()?
    };
    if repos.is_empty() {
        return Err(usage("no repositories given"));
    }
    let mut names: Vec<&str> = repos.iter().map(|r| r.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(usage(format!("repository {} listed twice", w[0])));
    }
    Ok(repos)
}

/// One JSON line on stderr identifying the run.
pub fn print_run_manifest(command: &str, c: &PipelineConfig, clock: Clock) {
    let m = serde_json::json!({
        "run": {
            "command": command,
            "bugpilot": env!("CARGO_PKG_VERSION"),
            "seed": c.seed,
            "config_fingerprint": c.fingerprint(),
            "backend": c.backend.kind,
            "model": c.backend.model,
            "runtime": c.runtime.kind,
            "tokenizer": default_tokenizer().name(),
            "parallelism": c.parallelism,
            "started_at": clock.now().to_rfc3339(),
        }
    });
    eprintln!("{m}");
}
