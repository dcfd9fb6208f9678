//! Command-line interface. Exit status: 0 success, 1 validation or runtime
//! error, 2 usage error.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use ontoprompt_core::context_store::load_contexts;
use ontoprompt_core::dialogue::{AnswerDocument, DialogueOutcome};
use ontoprompt_core::evaluation::{compute_metrics, load_judgments, render, tally};
use ontoprompt_core::meta_learning::{IterationPrompt, TuningRegistry, TuningSession};
use ontoprompt_core::meta_ontology::{
    load_meta_ontology, serialize_meta_ontology, validate_meta_ontology, MetaOntology, PromptTemplate,
    Severity,
};
use ontoprompt_core::prompt_engine::{instantiate, Bindings};
use serde_json::{json, Value};

use crate::config::EngineConfig;
use crate::server::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "ontoprompt", version, about = "Ontology-driven structured prompting engine")]
pub struct Cli {
    /// Engine configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true, env = "ONTO_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the HTTP API.
    Serve {
        /// Address to bind, overriding the configuration.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Ask questions: one with --text, otherwise one per stdin line.
    Chat {
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        language: Option<String>,
        /// Print {answer, trace} as JSON instead of plain text.
        #[arg(long)]
        json: bool,
        /// Leave the trace out of JSON output.
        #[arg(long)]
        no_trace: bool,
    },
    /// Check a meta-ontology and optionally a context document.
    Validate {
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        contexts: Option<PathBuf>,
    },
    /// Print counts and metrics for a judgments file.
    Eval {
        #[arg(long)]
        judgments: PathBuf,
    },
    /// Manage prompt tuning sessions.
    Tune(TuneArgs),
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    /// Session log (NDJSON).
    #[arg(long, env = "ONTO_SESSIONS_LOG")]
    pub log: PathBuf,
    #[command(subcommand)]
    pub action: TuneAction,
}

#[derive(Debug, Subcommand)]
pub enum TuneAction {
    Start {
        #[arg(long)]
        purpose: String,
    },
    /// Send a prompt to the backend and record the reply.
    Submit {
        #[arg(long)]
        session: String,
        /// Free-text draft prompt.
        #[arg(long, conflicts_with_all = ["draft_file", "template_id"])]
        draft: Option<String>,
        #[arg(long, conflicts_with = "template_id")]
        draft_file: Option<PathBuf>,
        /// Instantiate a template from the meta-ontology instead.
        #[arg(long, requires = "bindings")]
        template_id: Option<String>,
        /// JSON object of bindings for --template-id.
        #[arg(long)]
        bindings: Option<String>,
        #[arg(long, default_value = "")]
        notes: String,
    },
    /// Add a template to the meta-ontology and close the session.
    Finalize {
        #[arg(long)]
        session: String,
        /// Template document (JSON).
        #[arg(long)]
        template: PathBuf,
        /// Where to write the new meta-ontology; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Abandon {
        #[arg(long)]
        session: String,
    },
    List,
    Show {
        #[arg(long)]
        session: String,
    },
}

struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

type CliResult = Result<ExitCode, Failure>;

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime")
}

pub fn run(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Validate { meta, contexts } => validate(&meta, contexts.as_deref()),
        Command::Eval { judgments } => eval(&judgments),
        Command::Serve { bind } => serve(cli.config.as_deref(), bind),
        Command::Chat {
            text,
            language,
            json,
            no_trace,
        } => chat(cli.config.as_deref(), text, language, json, !no_trace),
        Command::Tune(args) => tune(cli.config.as_deref(), args),
    };
    match result {
        Ok(code) => code,
        Err(Failure(message)) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure(format!("{}: {e}", path.display())))
}

fn validate(meta: &Path, contexts: Option<&Path>) -> CliResult {
    let mut errors = 0;
    let mut warnings = 0;
    match serde_json::from_str::<MetaOntology>(&read(meta)?) {
        Err(e) => {
            println!("error: {}: {e}", meta.display());
            errors += 1;
        }
        Ok(onto) => {
            for d in validate_meta_ontology(&onto) {
                println!("{}: {}: {d}", if d.severity == Severity::Error { "error" } else { "warning" }, meta.display());
                match d.severity {
                    Severity::Error => errors += 1,
                    Severity::Warning => warnings += 1,
                }
            }
        }
    }
    if let Some(path) = contexts {
        match load_contexts(&read(path)?) {
            Ok(store) => println!("{}: {} contexts", path.display(), store.len()),
            Err(e) => {
                println!("error: {}: {e}", path.display());
                errors += 1;
            }
        }
    }
    println!("{errors} errors, {warnings} warnings");
    Ok(if errors == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn eval(path: &Path) -> CliResult {
    let judgments = load_judgments(&read(path)?)?;
    let counts = tally(&judgments);
    println!("judgments   {}", judgments.len());
    println!("tp          {}", counts.tp);
    println!("tn          {}", counts.tn);
    println!("fp          {}", counts.fp);
    println!("fn          {}", counts.fn_);
    for (name, metric) in compute_metrics(counts).entries() {
        let value = metric.as_ref().map(render).unwrap_or_else(|_| "undefined".into());
        println!("{name:<11} {value}");
    }
    Ok(ExitCode::SUCCESS)
}

fn state(config: &EngineConfig) -> Result<Arc<AppState>, Failure> {
    Ok(Arc::new(AppState::from_config(config)?))
}

fn serve(config: Option<&Path>, bind: Option<String>) -> CliResult {
    let mut config = EngineConfig::load(config)?;
    if let Some(b) = bind {
        config.bind = b;
    }
    let state = state(&config)?;
    runtime().block_on(server::serve(state, &config.bind, |addr| {
        println!("listening on {addr}");
        let _ = std::io::stdout().flush();
        tracing::info!(%addr, "serving");
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn print_answer(answer: &AnswerDocument) {
    if let Some(m) = &answer.message {
        println!("{m}");
    }
    for a in &answer.answers {
        println!("[{}]", a.intent);
        println!("{}", a.rendered);
    }
}

fn chat(config: Option<&Path>, text: Option<String>, language: Option<String>, as_json: bool, trace: bool) -> CliResult {
    let config = EngineConfig::load(config)?;
    let state = state(&config)?;
    let rt = runtime();
    let ask = |q: &str| -> Result<(), Failure> {
        let out: DialogueOutcome = rt
            .block_on(state.engine().run(q, language.as_deref()))
            .map_err(|e| Failure(e.to_string()))?;
        if as_json {
            let mut body = json!({ "answer": out.answer });
            if trace {
                body["trace"] = serde_json::to_value(&out.trace)?;
            }
            println!("{}", serde_json::to_string_pretty(&body)?);
        } else {
            print_answer(&out.answer);
        }
        Ok(())
    };
    match text {
        Some(q) => ask(&q)?,
        None => {
            let mut failed = false;
            for line in std::io::stdin().lock().lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                if let Err(Failure(m)) = ask(&line) {
                    eprintln!("error: {m}");
                    failed = true;
                }
            }
            if failed {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_session(s: &TuningSession) -> Result<(), Failure> {
    println!("{}", serde_json::to_string_pretty(s)?);
    Ok(())
}

fn tune(config: Option<&Path>, args: TuneArgs) -> CliResult {
    let registry = TuningRegistry::open(&args.log)?;
    let rt = runtime();
    match args.action {
        TuneAction::Start { purpose } => print_session(&registry.start_session(&purpose)?)?,
        TuneAction::List => {
            for s in rt.block_on(registry.list()) {
                println!("{}\t{:?}\t{} iterations\t{}", s.id, s.status, s.iterations.len(), s.purpose);
            }
        }
        TuneAction::Show { session } => print_session(&rt.block_on(registry.get(&session))?)?,
        TuneAction::Abandon { session } => print_session(&rt.block_on(registry.abandon_session(&session))?)?,
        TuneAction::Submit {
            session,
            draft,
            draft_file,
            template_id,
            bindings,
            notes,
        } => {
            let config = EngineConfig::load(config)?;
            let state = state(&config)?;
            let prompt = match (draft, draft_file, template_id) {
                (Some(d), _, _) => IterationPrompt::Draft(d),
                (_, Some(path), _) => IterationPrompt::Draft(read(&path)?),
                (_, _, Some(id)) => {
                    let onto = state.snapshot();
                    let t = onto
                        .template(&id)
                        .ok_or_else(|| Failure(format!("no template {id:?}")))?;
                    let raw: Value = serde_json::from_str(bindings.as_deref().unwrap_or("{}"))?;
                    let Value::Object(map) = raw else {
                        return Err(Failure("--bindings must be a JSON object".into()));
                    };
                    let mut b = Bindings::new();
                    for (k, v) in map {
                        b.insert(k, v);
                    }
                    IterationPrompt::Structured(instantiate(t, &b)?)
                }
                _ => return Err(Failure("one of --draft, --draft-file or --template-id is required".into())),
            };
            let it = rt.block_on(registry.submit_iteration(
                &session,
                prompt,
                &notes,
                state.backend().as_ref(),
                &config.completion(),
            ))?;
            println!("{}", it.response);
        }
        TuneAction::Finalize { session, template, out } => {
            let config = EngineConfig::load(config)?;
            let onto = load_meta_ontology(&read(&config.meta)?)?;
            let template: PromptTemplate = serde_json::from_str(&read(&template)?)?;
            let next = rt.block_on(registry.finalize_session(&session, template, &onto))?;
            let doc = serialize_meta_ontology(&next);
            match out {
                Some(path) => std::fs::write(&path, doc).map_err(|e| Failure(format!("{}: {e}", path.display())))?,
                None => print!("{doc}"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
