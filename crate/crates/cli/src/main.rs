use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use chorad::adapt::{publish_remote, spawn_manager, spawn_server, ManagerClient, Middleware, RuleServer};
use chorad::check::{check_rule, check_source};
use chorad::harness::{serve_functions, EnvChange, FunctionTable, RulePublication};
use chorad::runtime::{
    parse_input_script, run_all, run_role, ExternalLink, InputScript, InputSource, ManagerLink, RoleOutcome,
    RunOptions, TcpTransport,
};
use chorad::sim::{Mode, SimConfig, Simulator};
use chorad::{parse_rules, project, Program, ProjectedApp, Role, Value};

/// Exit status for violations and diagnostics.
const VIOLATIONS: u8 = 1;
/// Exit status for runtime failures.
const FAILURE: u8 = 2;

#[derive(Parser)]
#[command(name = "chorad", version, about = "Adaptable choreographies: check, compile, run and simulate AIOC programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, validate and check connectedness.
    Check { file: PathBuf },
    /// Project into per-role process code plus a deployment manifest.
    Compile {
        file: PathBuf,
        #[arg(short = 'o', long = "out")]
        out: PathBuf,
    },
    /// Execute a choreography.
    Run(RunArgs),
    /// Run the adaptation manager (with its environment).
    Manager {
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Run an adaptation server and register it with a manager.
    Server {
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "CHORAD_MANAGER")]
        manager: String,
        /// Rules published before the server starts answering.
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Read or change the manager's environment.
    Env {
        #[arg(long, env = "CHORAD_MANAGER")]
        manager: String,
        #[command(subcommand)]
        action: EnvAction,
    },
    /// Check a rule file and publish it on a server.
    Publish {
        file: PathBuf,
        #[arg(long)]
        server: String,
    },
    /// Serve stub external functions from a JSON table.
    Functions {
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        table: PathBuf,
    },
    /// Simulate deterministically.
    Sim(SimArgs),
}

#[derive(Subcommand)]
enum EnvAction {
    Set { key: String, value: String },
    Get,
}

#[derive(Args)]
struct RunArgs {
    file: PathBuf,
    /// Every role in this process.
    #[arg(long, conflicts_with_all = ["role", "listen"])]
    all: bool,
    /// The single role to run.
    #[arg(long, requires = "listen")]
    role: Option<String>,
    /// Listening address for `--role`.
    #[arg(long)]
    listen: Option<String>,
    /// Addresses of the other roles, `ROLE=ADDR`. Defaults to the preamble locations.
    #[arg(long = "peer", value_parser = parse_assignment)]
    peers: Vec<(String, String)>,
    /// Manager address; `--all` embeds a middleware when absent.
    #[arg(long, env = "CHORAD_MANAGER")]
    manager: Option<String>,
    /// Rules for the embedded middleware.
    #[arg(long, conflicts_with = "manager")]
    rules: Option<PathBuf>,
    /// Environment of the embedded middleware, `KEY=VALUE`.
    #[arg(long = "env", value_parser = parse_assignment, conflicts_with = "manager")]
    env: Vec<(String, String)>,
    /// JSON object mapping roles to their getInput answers.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Stub function table instead of the declared services.
    #[arg(long)]
    functions: Option<PathBuf>,
    /// Seconds a role waits for a message before giving up.
    #[arg(long, default_value_t = 30)]
    idle_timeout: u64,
}

#[derive(Args)]
struct SimArgs {
    file: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run this many consecutive seeds starting at `--seed`.
    #[arg(long)]
    seeds: Option<u64>,
    /// Rule file published at a step, `FILE@STEP` or `FILE@STEP@SERVER`.
    #[arg(long = "rules", value_parser = parse_rules_at)]
    rules: Vec<(PathBuf, u64, usize)>,
    /// Environment change at a step, `KEY=VALUE@STEP`.
    #[arg(long = "env", value_parser = parse_env_at)]
    env: Vec<EnvChange>,
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    functions: Option<PathBuf>,
    /// Number of rule servers.
    #[arg(long, default_value_t = 1)]
    servers: usize,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Write a JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Explore every schedule instead of sampling one.
    #[arg(long)]
    exhaustive: bool,
    /// Print the event trace of the `--seed` run.
    #[arg(long)]
    trace: bool,
}

fn parse_assignment(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected NAME=VALUE, got `{s}`"))
}

fn parse_rules_at(s: &str) -> Result<(PathBuf, u64, usize), String> {
    let bad = || format!("expected FILE@STEP or FILE@STEP@SERVER, got `{s}`");
    let mut parts = s.rsplitn(3, '@').collect::<Vec<_>>();
    parts.reverse();
    match parts.as_slice() {
        [file, step] => Ok((file.into(), step.parse().map_err(|_| bad())?, 0)),
        [file, step, server] => match (step.parse(), server.parse()) {
            (Ok(step), Ok(server)) => Ok((file.into(), step, server)),
            // The file name itself contains an `@`.
            _ => Ok((format!("{file}@{step}").into(), server.parse().map_err(|_| bad())?, 0)),
        },
        _ => Err(bad()),
    }
}

fn parse_env_at(s: &str) -> Result<EnvChange, String> {
    let (kv, step) = s.rsplit_once('@').ok_or_else(|| format!("expected KEY=VALUE@STEP, got `{s}`"))?;
    let (key, value) = parse_assignment(kv)?;
    Ok(EnvChange {
        step: step.parse().map_err(|_| format!("bad step in `{s}`"))?,
        key,
        value: Value::from_cli(&value),
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn read_script(path: Option<&PathBuf>) -> Result<Option<InputScript>> {
    path.map(|p| parse_input_script(&read(p)?).with_context(|| format!("bad input script {}", p.display())))
        .transpose()
}

fn read_table(path: &Path) -> Result<FunctionTable> {
    let table: FunctionTable =
        serde_json::from_str(&read(path)?).with_context(|| format!("bad function table {}", path.display()))?;
    Ok(table.with_timers())
}

/// Parses and checks `file`, printing every finding. `None` when errors
/// were found.
fn load(file: &Path) -> Result<Option<Program>> {
    let text = read(file)?;
    let name = file.display().to_string();
    match check_source(&text) {
        Err(diags) => {
            for d in diags {
                println!("{name}:{d}");
            }
            Ok(None)
        }
        Ok((program, violations)) => {
            for v in &violations {
                println!("{}", v.render(&name));
            }
            Ok((!violations.iter().any(|v| v.is_error())).then_some(program))
        }
    }
}

fn check(file: &Path) -> Result<u8> {
    Ok(match load(file)? {
        Some(_) => {
            println!("{}: ok", file.display());
            0
        }
        None => VIOLATIONS,
    })
}

fn compile(file: &Path, out: &Path) -> Result<u8> {
    let Some(program) = load(file)? else {
        return Ok(VIOLATIONS);
    };
    let app = project(&program)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut roles = Vec::new();
    for (role, code) in &app.per_role {
        let name = format!("{}.json", role.as_str());
        fs::write(out.join(&name), serde_json::to_string_pretty(code)?)?;
        roles.push(serde_json::json!({
            "role": role.as_str(),
            "code": name,
            "location": app.locations.get(role),
        }));
    }
    let manifest = serde_json::json!({
        "source": file.display().to_string(),
        "starter": app.starter.as_str(),
        "roles": roles,
        "includes": app.includes,
        "scopes": app.scopes,
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote {} roles to {}", app.per_role.len(), out.display());
    Ok(0)
}

fn print_outcome(o: &RoleOutcome) {
    let vars: BTreeMap<_, _> = o.vars.iter().map(|(k, v)| (k.clone(), v.to_json())).collect();
    println!("{}: {}", o.role.as_str(), serde_json::Value::Object(vars.into_iter().collect()));
    if o.misdeliveries > 0 {
        eprintln!("{}: {} misdelivered messages", o.role.as_str(), o.misdeliveries);
    }
}

fn run(args: &RunArgs) -> Result<u8> {
    if !args.all && args.role.is_none() {
        bail!("`run` needs either --all or --role with --listen");
    }
    let Some(program) = load(&args.file)? else {
        return Ok(VIOLATIONS);
    };
    let app = project(&program)?;
    let manager = match &args.manager {
        Some(addr) => ManagerLink::Remote(addr.clone()),
        None if args.all => {
            let mut server = RuleServer::new("local");
            if let Some(rules) = &args.rules {
                server
                    .publish(&read(rules)?)
                    .map_err(|d| anyhow!("rules rejected:\n{}", d.join("\n")))?;
            }
            let mut mw = Middleware::new();
            mw.register(server);
            for (k, v) in &args.env {
                mw.env.set(k.clone(), Value::from_cli(v));
            }
            ManagerLink::InProcess(Arc::new(Mutex::new(mw)))
        }
        None => ManagerLink::None,
    };
    let external = match &args.functions {
        Some(path) => ExternalLink::Table(Arc::new(Mutex::new(read_table(path)?))),
        None => ExternalLink::Remote { override_address: None },
    };
    let opts = RunOptions {
        manager,
        external,
        input: read_script(args.script.as_ref())?.map_or(InputSource::Console, InputSource::Script),
        idle_timeout: Duration::from_secs(args.idle_timeout),
        trace: false,
    };
    let outcomes = if args.all {
        run_all(&app, &opts)?
    } else {
        vec![run_one(&app, args, &opts)?]
    };
    for o in &outcomes {
        print_outcome(o);
    }
    Ok(if outcomes.iter().any(|o| o.misdeliveries > 0) { FAILURE } else { 0 })
}

fn run_one(app: &ProjectedApp, args: &RunArgs, opts: &RunOptions) -> Result<RoleOutcome> {
    let role = Role::new(args.role.clone().unwrap_or_default());
    if !app.per_role.contains_key(&role) {
        bail!("no role `{}` in {}", role.as_str(), args.file.display());
    }
    let mut peers: BTreeMap<String, String> =
        app.locations.iter().map(|(r, a)| (r.as_str().to_string(), a.clone())).collect();
    peers.extend(args.peers.iter().cloned());
    for r in app.roles().filter(|r| **r != role) {
        if !peers.contains_key(r.as_str()) {
            bail!("no address for role `{}`; pass --peer {}=ADDR", r.as_str(), r.as_str());
        }
    }
    let listen = args.listen.as_deref().unwrap_or_default();
    let (transport, inbox) = TcpTransport::bind(listen, peers).with_context(|| format!("cannot listen on {listen}"))?;
    log::info!("{} listening on {}", role.as_str(), transport.address());
    Ok(run_role(app, &role, transport, inbox, opts)?)
}

fn serve_forever(what: &str, handle: chorad::net::ServiceHandle) -> ! {
    // Scripts wait for this line before connecting.
    println!("{what} listening on {}", handle.addr());
    handle.wait()
}

fn publish(file: &Path, server: &str) -> Result<u8> {
    let text = read(file)?;
    let name = file.display().to_string();
    let rules = match parse_rules(&text) {
        Ok(r) => r,
        Err(diags) => {
            for d in diags {
                println!("{name}:{d}");
            }
            return Ok(VIOLATIONS);
        }
    };
    let violations: Vec<_> = rules.iter().flat_map(check_rule).collect();
    for v in &violations {
        println!("{}", v.render(&name));
    }
    if violations.iter().any(|v| v.is_error()) {
        return Ok(VIOLATIONS);
    }
    match publish_remote(server, &text).with_context(|| format!("cannot reach server {server}"))? {
        Ok(ids) => {
            for id in ids {
                println!("{id}");
            }
            Ok(0)
        }
        Err(diags) => {
            for d in diags {
                println!("{name}: rejected: {d}");
            }
            Ok(VIOLATIONS)
        }
    }
}

fn sim(args: &SimArgs) -> Result<u8> {
    let Some(program) = load(&args.file)? else {
        return Ok(VIOLATIONS);
    };
    let simulator = Simulator::new(&program)?;
    let mut cfg = SimConfig {
        seed: args.seed,
        mode: if args.exhaustive { Mode::Exhaustive } else { Mode::Random },
        env_timeline: args.env.clone(),
        servers: args.servers,
        trace: args.trace,
        ..SimConfig::default()
    };
    if let Some(script) = read_script(args.script.as_ref())? {
        cfg.input_script = script;
    }
    if let Some(path) = &args.functions {
        cfg.functions = read_table(path)?;
    }
    if let Some(n) = args.max_steps {
        cfg.max_steps = n;
    }
    for (file, step, server) in &args.rules {
        cfg.rule_sets.push(RulePublication {
            step: *step,
            server: *server,
            source: read(file)?,
        });
    }

    let mut report = serde_json::Map::new();
    report.insert("source".into(), args.file.display().to_string().into());
    let clean;
    if args.exhaustive {
        let r = simulator.explore(&cfg)?;
        println!(
            "explored {} states, {} terminal: {} deadlocks, {} faults, {} misdeliveries, {} inversions, {} leaks{}",
            r.states,
            r.terminal,
            r.deadlocks,
            r.faults,
            r.misdeliveries,
            r.inversions,
            r.leaks,
            if r.truncated { " (truncated)" } else { "" }
        );
        clean = !r.found_problem() && !r.truncated;
        report.insert("exploration".into(), serde_json::to_value(&r)?);
    } else {
        let run = simulator.run(&cfg)?;
        println!("seed {}: {:?} after {} steps", cfg.seed, run.outcome, run.steps);
        for (role, store) in &run.final_states {
            let vars: serde_json::Map<_, _> = store.iter().map(|(k, v)| (k.clone(), v.to_json())).collect();
            println!("{role}: {}", serde_json::Value::Object(vars));
        }
        for f in &run.faults {
            eprintln!("fault: {f}");
        }
        for l in &run.leaks {
            eprintln!("leak: {l}");
        }
        if args.trace {
            print!("{}", run.trace_text());
        }
        let mut ok = run.outcome == chorad::sim::Outcome::Terminated && run.leaks.is_empty() && run.misdeliveries == 0;
        if let Some(n) = args.seeds {
            let summary = simulator.explore_seeds(&SimConfig { trace: false, ..cfg.clone() }, n)?;
            println!(
                "{} seeds: {} terminated, {} deadlocks, {} faults, {} step limits, {} leaking, {} misdelivering, {} adapted",
                summary.runs,
                summary.terminated,
                summary.deadlocks,
                summary.faults,
                summary.step_limits,
                summary.leaks,
                summary.misdeliveries,
                summary.adapted_runs
            );
            ok &= summary.terminated == summary.runs && summary.leaks == 0 && summary.misdeliveries == 0;
            report.insert("seeds".into(), serde_json::to_value(&summary)?);
        }
        report.insert("run".into(), serde_json::to_value(&run)?);
        clean = ok;
    }
    if let Some(path) = &args.report {
        fs::write(path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(if clean { 0 } else { FAILURE })
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Check { file } => check(&file),
        Command::Compile { file, out } => compile(&file, &out),
        Command::Run(args) => run(&args),
        Command::Manager { port, host } => {
            let handle = spawn_manager(&format!("{host}:{port}"))?;
            serve_forever("manager", handle)
        }
        Command::Server {
            port,
            host,
            manager,
            rules,
        } => {
            let rules = rules.as_deref().map(read).transpose()?;
            let handle = spawn_server(&format!("{host}:{port}"), Some(&manager), rules.as_deref())
                .with_context(|| format!("cannot start server registered at {manager}"))?;
            serve_forever("server", handle)
        }
        Command::Env { manager, action } => {
            let client = ManagerClient::new(manager.clone());
            match action {
                EnvAction::Set { key, value } => client
                    .env_set(&key, Value::from_cli(&value))
                    .with_context(|| format!("cannot reach manager {manager}"))?,
                EnvAction::Get => {
                    let env = client.env_get().with_context(|| format!("cannot reach manager {manager}"))?;
                    for (k, v) in env {
                        println!("{k}={}", v.render());
                    }
                }
            }
            Ok(0)
        }
        Command::Publish { file, server } => publish(&file, &server),
        Command::Functions { port, host, table } => {
            let table = Arc::new(Mutex::new(read_table(&table)?));
            let handle = serve_functions(table, &format!("{host}:{port}"))?;
            serve_forever("functions", handle)
        }
        Command::Sim(args) => sim(&args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { VIOLATIONS } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(FAILURE)
        }
    }
}
