//! Acceptance criteria 1 to 10. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

mod support;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use chorad::adapt::{publish_remote, spawn_manager, spawn_server, ManagerClient};
use chorad::ast::{BehaviourKind, Value};
use chorad::check::{check_program, check_source, ViolationKind};
use chorad::harness::{
    corpus, fork_join_expected, fork_join_message, fork_join_program, fork_join_rules, pipe_program, pipe_rules,
    unmet_expectations, EnvChange, RulePublication, Scenario, APPOINTMENT_SOURCE,
    HELLO_RULE_SOURCE, HELLO_SOURCE,
};
use chorad::parser::parse_program;
use chorad::project::project;
use chorad::runtime::{run_all, ExternalLink, InputSource, ManagerLink, RunOptions};
use chorad::sim::{simulate, Outcome, SimConfig, Simulator};
use chorad::{Behaviour, Program};

const MISORDERED: &str = include_str!("../corpus/appointment_misordered.aioc");
const DOUBLE_NOTIFY: &str = include_str!("../corpus/appointment_double_notify.aioc");

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn program(src: &str) -> Program {
    parse_program(src).expect("corpus programs parse")
}

fn node_text(body: &Behaviour, id: &chorad::NodeId) -> String {
    let mut found = String::new();
    body.walk(&mut |b| {
        if b.id() == id {
            found = match &b.kind {
                BehaviourKind::Assign { var, role, .. } => format!("{var}@{role}"),
                BehaviourKind::Interaction { op, .. } => op.clone(),
                _ => format!("{id}"),
            };
        }
    });
    found
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn criterion_1() -> Verdict {
    let (r, t1) = timed(|| check_source(APPOINTMENT_SOURCE));
    let (_, v) = r.map_err(|d| format!("appointment does not parse: {}", d[0]))?;
    ensure(v.is_empty(), format!("appointment: {} violations", v.len()))?;

    let (r, t2) = timed(|| check_source(MISORDERED));
    let (p, v) = r.map_err(|d| format!("misordered variant does not parse: {}", d[0]))?;
    ensure(v.len() == 1, format!("misordered: expected 1 violation, got {}", v.len()))?;
    ensure(v[0].kind == ViolationKind::Sequence, "misordered: not a sequence violation")?;
    let mut pair = [node_text(&p.body, &v[0].nodes.0), node_text(&p.body, &v[0].nodes.1)];
    pair.sort();
    ensure(
        pair == ["free_day@bob".to_string(), "is_free@alice".to_string()],
        format!("misordered: violation pairs {pair:?}"),
    )?;

    let (r, t3) = timed(|| check_source(DOUBLE_NOTIFY));
    let (_, v) = r.map_err(|d| format!("double notify does not parse: {}", d[0]))?;
    ensure(
        v.len() == 1 && v[0].kind == ViolationKind::Parallel,
        format!("double notify: expected one parallel violation, got {v:?}"),
    )?;
    let slowest = t1.max(t2).max(t3);
    ensure(slowest < Duration::from_secs(1), format!("slowest check took {slowest:?}"))?;
    Ok(format!("0 / 1 sequence (is_free@alice after free_day@bob) / 1 parallel; slowest {slowest:?}"))
}

fn criterion_2() -> Verdict {
    let p = program(HELLO_SOURCE);
    let base = simulate(&p, &SimConfig::default()).map_err(|e| e.to_string())?;
    let plain = base.var("display", "msg").cloned();
    ensure(plain == Some(Value::from("Hello World")), format!("lang unset: {plain:?}"))?;
    let cfg = SimConfig {
        rule_sets: vec![RulePublication {
            step: 0,
            server: 0,
            source: HELLO_RULE_SOURCE.into(),
        }],
        env_timeline: vec![EnvChange {
            step: 0,
            key: "lang".into(),
            value: Value::from("it"),
        }],
        ..SimConfig::default()
    };
    let it = simulate(&p, &cfg).map_err(|e| e.to_string())?;
    let adapted = it.var("display", "msg").cloned();
    ensure(adapted == Some(Value::from("Ciao Mondo")), format!("lang=it: {adapted:?}"))?;

    // The same through the TCP middleware and the threaded runtime.
    let manager = spawn_manager("127.0.0.1:0").map_err(|e| e.to_string())?;
    let maddr = manager.addr().to_string();
    let server = spawn_server("127.0.0.1:0", Some(&maddr), None).map_err(|e| e.to_string())?;
    let app = project(&p).map_err(|e| e.to_string())?;
    let opts = RunOptions {
        manager: ManagerLink::Remote(maddr.clone()),
        external: ExternalLink::default(),
        input: InputSource::Script(Default::default()),
        idle_timeout: Duration::from_secs(10),
        trace: false,
    };
    let display = |out: Vec<chorad::runtime::RoleOutcome>| {
        out.into_iter()
            .find(|o| o.role.as_str() == "display")
            .and_then(|o| o.vars.get("msg").cloned())
    };
    let before = display(run_all(&app, &opts).map_err(|e| e.to_string())?);
    ManagerClient::new(maddr.clone())
        .env_set("lang", Value::from("it"))
        .map_err(|e| e.to_string())?;
    publish_remote(&server.addr().to_string(), HELLO_RULE_SOURCE)
        .map_err(|e| e.to_string())?
        .map_err(|d| d.join("; "))?;
    let after = display(run_all(&app, &opts).map_err(|e| e.to_string())?);
    ensure(
        before == Some(Value::from("Hello World")) && after == Some(Value::from("Ciao Mondo")),
        format!("over TCP: {before:?} then {after:?}"),
    )?;
    Ok("\"Hello World\" then \"Ciao Mondo\" (sim and TCP middleware)".into())
}

fn criterion_3() -> Verdict {
    let p = program(&pipe_program(100, true));
    let (plain, t1) = timed(|| simulate(&p, &SimConfig::default()));
    let plain = plain.map_err(|e| e.to_string())?;
    let cfg = SimConfig {
        rule_sets: vec![RulePublication {
            step: 0,
            server: 0,
            source: pipe_rules(50),
        }],
        ..SimConfig::default()
    };
    let (adapted, t2) = timed(|| simulate(&p, &cfg));
    let adapted = adapted.map_err(|e| e.to_string())?;
    for (r, want) in [(&plain, 100), (&adapted, 150)] {
        for role in ["a", "b"] {
            let got = r.var(role, "x").cloned();
            ensure(got == Some(Value::Int(want)), format!("{role}.x = {got:?}, expected {want}"))?;
        }
    }
    let applied: Vec<_> = adapted.applied_rules.iter().filter(|a| a.rule_id.is_some()).collect();
    ensure(applied.len() == 50, format!("{} scopes adapted, expected 50", applied.len()))?;
    let total = t1 + t2;
    ensure(total < Duration::from_secs(30), format!("took {total:?}"))?;
    Ok(format!("x=100 and x=150; {total:?}"))
}

fn criterion_4() -> Verdict {
    let mut lines = Vec::new();
    for n in [5usize, 100] {
        let message = fork_join_message(n);
        let p = program(&fork_join_program(n, true));
        for doubled in [vec![], vec![0usize, 1]] {
            let cfg = SimConfig {
                functions: chorad::harness::fork_join_table(&message),
                rule_sets: if doubled.is_empty() {
                    vec![]
                } else {
                    vec![RulePublication {
                        step: 0,
                        server: 0,
                        source: fork_join_rules(&doubled),
                    }]
                },
                seed: 7,
                ..SimConfig::default()
            };
            let r = simulate(&p, &cfg).map_err(|e| e.to_string())?;
            let want = fork_join_expected(&message, &doubled);
            ensure(r.buffer == want, format!("n={n} doubled={doubled:?}: {:?} != {want:?}", r.buffer))?;
            if n == 5 {
                lines.push(r.buffer);
            }
        }
    }
    ensure(lines == ["bcdef", "cddef"], format!("abcde gave {lines:?}"))?;
    Ok("abcde -> bcdef / cddef; n=100 matches the per-character oracle".into())
}

/// A copy of `s` whose rule sets and env changes land at `step`.
fn mid_run(s: &Scenario, rules: &[RulePublication], env: &[EnvChange], step: u64) -> Scenario {
    let mut s = s.clone();
    s.rules = rules.iter().map(|r| RulePublication { step, ..r.clone() }).collect();
    s.env = env.iter().map(|e| EnvChange { step: step / 2, ..e.clone() }).collect();
    s
}

fn criterion_5() -> Verdict {
    const SEEDS: u64 = 1000;
    let all = corpus();
    let by_name: BTreeMap<_, _> = all.iter().map(|s| (s.name.clone(), s.clone())).collect();
    // Rules and env for the mid-run variants, borrowed from the adapted
    // sibling scenario.
    let sibling = |name: &str| -> Option<&Scenario> {
        let key = match name {
            "helloworld" | "helloworld-it" => "helloworld-it",
            "appointment-accept" | "appointment-picnic" => "appointment-picnic",
            n if n.ends_with("-norules") => return by_name.get(&n.replace("-norules", "-rules")),
            n => n,
        };
        by_name.get(key)
    };
    let started = Instant::now();
    let (mut runs, mut deadlocks, mut leaks, mut other, mut adapted_mid) = (0, 0, 0, Vec::new(), 0);
    for s in &all {
        let p = program(&s.program);
        let sim = Simulator::new(&p).map_err(|e| format!("{}: {e}", s.name))?;
        let base = SimConfig::for_scenario(s);
        let steps = sim.run(&base).map_err(|e| e.to_string())?.steps;
        let mut variants = vec![(s.clone(), true)];
        if let Some(sib) = sibling(&s.name) {
            if !sib.rules.is_empty() {
                variants.push((mid_run(s, &sib.rules, &sib.env, steps / 2), false));
            }
        }
        for (v, static_config) in variants {
            let mut cfg = SimConfig::for_scenario(&v);
            for seed in 0..SEEDS {
                cfg.seed = seed;
                let r = sim.run(&cfg).map_err(|e| e.to_string())?;
                runs += 1;
                match r.outcome {
                    Outcome::Terminated => {}
                    Outcome::Deadlock => deadlocks += 1,
                    o => other.push(format!("{} seed {seed}: {o:?} {:?}", v.name, r.faults)),
                }
                leaks += (!r.leaks.is_empty() || r.misdeliveries > 0) as u64;
                if static_config && r.outcome == Outcome::Terminated {
                    let vars = r.final_states.clone();
                    let unmet = unmet_expectations(&v, &vars, &r.buffer);
                    if !unmet.is_empty() {
                        other.push(format!("{} seed {seed}: {}", v.name, unmet.join(", ")));
                    }
                } else if r.applied_rules.iter().any(|a| a.rule_id.is_some()) {
                    adapted_mid += 1;
                }
            }
        }
    }
    let elapsed = started.elapsed();
    other.truncate(5);
    ensure(deadlocks == 0, format!("{deadlocks} deadlocks"))?;
    ensure(leaks == 0, format!("{leaks} runs with leaks or misdeliveries"))?;
    ensure(other.is_empty(), format!("unexpected outcomes: {other:?}"))?;
    ensure(elapsed < Duration::from_secs(600), format!("took {elapsed:?}"))?;
    Ok(format!(
        "{runs} runs, 0 deadlocks, 0 leaks; {adapted_mid} mid-run runs adapted; {elapsed:.1?}"
    ))
}

fn criterion_6() -> Verdict {
    let started = Instant::now();
    let (mut accepted, mut tried, mut states, mut problems) = (0, 0u64, 0usize, Vec::new());
    let cfg = SimConfig::default();
    while accepted < 1000 {
        let src = support::random_program(tried, 6, 3);
        tried += 1;
        let p = program(&src);
        if check_program(&p).iter().any(|v| v.is_error()) {
            continue;
        }
        accepted += 1;
        let rep = Simulator::new(&p).map_err(|e| e.to_string())?.explore(&cfg).map_err(|e| e.to_string())?;
        states += rep.states;
        if rep.truncated || rep.found_problem() {
            problems.push(format!("{src:?}: {rep:?}"));
        }
    }
    problems.truncate(3);
    ensure(problems.is_empty(), format!("{problems:?}"))?;

    let control = program(
        "include isFreeDay from \"socket://localhost:8000\"\npreamble { starter: bob }\naioc {\n  free_day@bob = getInput( \"Insert your free day\" );\n  is_free@alice = isFreeDay( bob_free_day );\n  proposal: bob( free_day ) -> alice( bob_free_day )\n}",
    );
    ensure(Simulator::new(&control).is_err(), "the control program passed the checker")?;
    let mut ccfg = SimConfig::default();
    ccfg.input_script.insert("bob".into(), ["2024-06-01".to_string()].into());
    ccfg.functions = ccfg.functions.with("isFreeDay", chorad::harness::FunctionSpec::Fixed { value: Value::Bool(true) });
    let rep = Simulator::new_unchecked(&control)
        .map_err(|e| e.to_string())?
        .explore(&ccfg)
        .map_err(|e| e.to_string())?;
    ensure(
        rep.deadlocks + rep.faults + rep.inversions > 0,
        format!("control not caught: {rep:?}"),
    )?;
    let dup = program("preamble { starter: cinema }\naioc { t@cinema = 1; u@cinema = 2; { notify: cinema( t ) -> bob( x ) | notify: cinema( u ) -> bob( y ) } }");
    let rep2 = Simulator::new_unchecked(&dup)
        .map_err(|e| e.to_string())?
        .explore(&SimConfig::default())
        .map_err(|e| e.to_string())?;
    ensure(rep2.misdeliveries > 0, format!("parallel control not caught: {rep2:?}"))?;
    Ok(format!(
        "1000 connected programs ({tried} generated, {states} states) clean; controls: {} faulting / {} inverted / {} deadlocked terminal states, {} misdelivering; {:.1?}",
        rep.faults,
        rep.inversions,
        rep.deadlocks,
        rep2.misdeliveries,
        started.elapsed()
    ))
}

fn criterion_7() -> Verdict {
    let p = program(HELLO_SOURCE);
    let rule = |msg: &str| {
        format!("rule {{\n  on {{ N.name == \"hello_world\" }}\n  do {{ msg@user = \"{msg}\" }}\n}}\n")
    };
    let across = SimConfig {
        servers: 2,
        rule_sets: vec![
            RulePublication {
                step: 0,
                server: 0,
                source: rule("from A"),
            },
            RulePublication {
                step: 0,
                server: 1,
                source: rule("from B"),
            },
        ],
        ..SimConfig::default()
    };
    let within = SimConfig {
        rule_sets: vec![RulePublication {
            step: 0,
            server: 0,
            source: format!("{}{}", rule("earlier"), rule("later")),
        }],
        ..SimConfig::default()
    };
    let sim = Simulator::new(&p).map_err(|e| e.to_string())?;
    let (mut a_wins, mut early_wins) = (0, 0);
    for seed in 0..100 {
        let r = sim.run(&SimConfig { seed, ..across.clone() }).map_err(|e| e.to_string())?;
        a_wins += (r.var("display", "msg") == Some(&Value::from("from A"))
            && r.applied_rules[0].rule_id.as_deref() == Some("server0#0")) as u32;
        let r = sim.run(&SimConfig { seed, ..within.clone() }).map_err(|e| e.to_string())?;
        early_wins += (r.var("display", "msg") == Some(&Value::from("earlier"))) as u32;
    }
    ensure(a_wins == 100 && early_wins == 100, format!("A won {a_wins}/100, earlier won {early_wins}/100"))?;

    // Registration order through the TCP manager as well.
    let manager = spawn_manager("127.0.0.1:0").map_err(|e| e.to_string())?;
    let maddr = manager.addr().to_string();
    let sa = spawn_server("127.0.0.1:0", Some(&maddr), Some(&rule("from A"))).map_err(|e| e.to_string())?;
    let sb = spawn_server("127.0.0.1:0", Some(&maddr), Some(&rule("from B"))).map_err(|e| e.to_string())?;
    let app = project(&p).map_err(|e| e.to_string())?;
    let opts = RunOptions {
        manager: ManagerLink::Remote(maddr),
        input: InputSource::Script(Default::default()),
        idle_timeout: Duration::from_secs(10),
        ..RunOptions::default()
    };
    let mut tcp_wins = 0;
    for _ in 0..10 {
        let out = run_all(&app, &opts).map_err(|e| e.to_string())?;
        tcp_wins += out
            .iter()
            .any(|o| o.role.as_str() == "display" && o.vars.get("msg") == Some(&Value::from("from A"))) as u32;
    }
    drop((sa, sb));
    ensure(tcp_wins == 10, format!("over TCP A won {tcp_wins}/10"))?;
    Ok("A over B 100/100, earlier over later 100/100, A over B 10/10 over TCP".into())
}

fn criterion_8() -> Verdict {
    let sizes: Vec<usize> = (1..=10).map(|k| k * 100).collect();
    let mut times = Vec::new();
    for &n in &sizes {
        let src = pipe_program(n, true);
        let best = (0..5)
            .map(|_| {
                let t = Instant::now();
                let (_, v) = check_source(&src).expect("pipe parses");
                assert!(v.is_empty());
                t.elapsed()
            })
            .min()
            .unwrap();
        times.push(best.as_secs_f64());
    }
    let xs: Vec<f64> = sizes.iter().map(|&n| n as f64 / 1000.0).collect();
    let design = nalgebra::DMatrix::from_fn(xs.len(), 4, |i, j| xs[i].powi(j as i32));
    let y = nalgebra::DVector::from_vec(times.clone());
    let coef = design
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| e.to_string())?;
    let fitted = &design * coef;
    let mean = y.mean();
    let ss_res: f64 = (&y - &fitted).iter().map(|r| r * r).sum();
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r2 = 1.0 - ss_res / ss_tot;
    let t1000 = *times.last().unwrap();
    ensure(r2 >= 0.99, format!("R^2 = {r2:.4}, times {times:?}"))?;
    ensure(t1000 < 5.0, format!("n=1000 took {t1000:.3}s"))?;
    Ok(format!("cubic fit R^2 = {r2:.4}; n=1000 in {:.1} ms", t1000 * 1e3))
}

fn criterion_9() -> Verdict {
    const SCOPE: [&str; 4] = ["directive", "done", "middleware", "matchRequests"];
    let counts = |n: usize, scopes: bool, servers: usize| -> Result<BTreeMap<String, u64>, String> {
        let p = program(&pipe_program(n, scopes));
        Ok(simulate(&p, &SimConfig { servers, ..SimConfig::default() })
            .map_err(|e| e.to_string())?
            .message_counts)
    };
    let get = |m: &BTreeMap<String, u64>, k: &str| m.get(k).copied().unwrap_or(0);
    let mut notes = Vec::new();
    for servers in [0, 1, 2] {
        let c10 = counts(10, true, servers)?;
        let c20 = counts(20, true, servers)?;
        for k in SCOPE {
            let (a, b) = (get(&c10, k), get(&c20, k));
            ensure(a > 0 && b == 2 * a, format!("{servers} servers, {k}: {a} at n=10, {b} at n=20"))?;
            ensure(a % 10 == 0, format!("{k} not constant per scope: {a} for 10 scopes"))?;
        }
        ensure(get(&c10, "matchRequests") == 10, "expected 10 match requests at n=10")?;
        ensure(
            get(&c10, "directive") == 10 && get(&c10, "done") == 10,
            format!("expected 10 directive and 10 done at n=10, got {c10:?}"),
        )?;
        ensure(
            get(&c10, "middleware") == 10 * (2 + 2 * servers as u64),
            format!("middleware count {} with {servers} servers", get(&c10, "middleware")),
        )?;
        notes.push(format!("{servers} servers: {} middleware msgs/scope", 2 + 2 * servers));
    }
    let flat = counts(10, false, 1)?;
    for k in SCOPE {
        ensure(get(&flat, k) == 0, format!("scopeless program has {k} = {}", get(&flat, k)))?;
    }
    Ok(format!("n=20/n=10 = 2 for {SCOPE:?}; 1 directive + 1 done per scope; {}; scopeless: 0", notes.join(", ")))
}

fn criterion_10() -> Verdict {
    let mut checked = 0;
    for s in corpus() {
        let p = program(&s.program);
        let sim = Simulator::new(&p).map_err(|e| e.to_string())?;
        let cfg = SimConfig {
            seed: 42,
            ..SimConfig::for_scenario(&s)
        };
        let first = sim.run(&cfg).map_err(|e| e.to_string())?.trace_hash;
        for _ in 1..10 {
            let again = sim.run(&cfg).map_err(|e| e.to_string())?.trace_hash;
            ensure(again == first, format!("{}: hash {again} != {first}", s.name))?;
        }
        // Fresh projection as well, not only a reused simulator.
        let fresh = Simulator::new(&program(&s.program)).map_err(|e| e.to_string())?;
        ensure(fresh.run(&cfg).map_err(|e| e.to_string())?.trace_hash == first, format!("{}: fresh run differs", s.name))?;
        checked += 1;
    }
    Ok(format!("{checked} scenarios x 10 runs, identical trace hashes"))
}

fn main() {
    type Criterion = (u32, &'static str, fn() -> Verdict);
    let criteria: [Criterion; 10] = [
        (1, "connectedness golden set", criterion_1),
        (2, "hello-world adaptation", criterion_2),
        (3, "pipe semantics", criterion_3),
        (4, "fork-join semantics", criterion_4),
        (5, "deadlock freedom over the corpus", criterion_5),
        (6, "checker soundness sample", criterion_6),
        (7, "first-match selection", criterion_7),
        (8, "polynomial check scaling", criterion_8),
        (9, "overhead counting", criterion_9),
        (10, "determinism", criterion_10),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let verdict = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match verdict {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why} ({:.1?})", started.elapsed());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
