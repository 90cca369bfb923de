//! `randlock`: demos, two-party play over TCP, replay, and ledger and trace tooling.
//!
//! Exit codes: 0 success, 1 i/o or internal error, 2 protocol abort,
//! 3 verification failure, 64 usage error.

use std::fs;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use randlock_core::fairness::{run_fairness, verify_summary, FairnessReport, SUMMARY_KIND};
use randlock_core::group::Scalar;
use randlock_core::ledger::LedgerState;
use randlock_core::protocol::{run_local, trace, Cheat, Flow, OutcomeReport, ProtocolError, Role, SessionConfig, SessionStatus};
use randlock_core::session_net::{run_host, run_join, PeerOptions, TcpTransport};
use randlock_core::statetrace::{build_tree, verify_trace, PublicTreeCommitments, TracePath, TraceRun, TransitionFn};
use randlock_core::transcript::{replay, Transcript};
use serde::Serialize;

const EXIT_ABORT: u8 = 2;
const EXIT_VERIFY: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "randlock", version, about = "Hide-and-guess wagers settled on a simulated UTXO ledger")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run both parties in-process and narrate every step.
    Demo(DemoArgs),
    /// Re-verify a transcript or a fairness summary.
    Replay {
        file: PathBuf,
    },
    /// Win statistics over many seeded games.
    Fairness(FairnessArgs),
    /// Ledger dump tooling.
    Ledger {
        #[command(subcommand)]
        cmd: LedgerCmd,
    },
    /// State-trace tree tooling.
    Trace {
        #[command(subcommand)]
        cmd: TraceCmd,
    },
    /// Play the challenger side, waiting for one peer on a TCP port.
    Host(HostArgs),
    /// Play the accepter side against a host.
    Join(JoinArgs),
    /// Serve the HTTP and WebSocket API for browser play.
    Daemon {
        #[arg(long, default_value_t = 8787)]
        port: u16,
    },
}

#[derive(Args, Clone)]
struct SeedArg {
    /// Session seed; every run with the same seed is byte-identical.
    #[arg(long, env = "RANDLOCK_SEED", default_value = "0")]
    seed: String,
}

#[derive(Args, Clone, Default)]
struct GameArgs {
    /// Number of thimbles or commitments.
    #[arg(short = 'n', long)]
    n: Option<usize>,
    /// Challenger's hidden index, 1-based.
    #[arg(long)]
    x: Option<usize>,
    /// Accepter's guess, 1-based.
    #[arg(long)]
    y: Option<usize>,
    /// Refund height of the funded outputs.
    #[arg(long)]
    t1: Option<u64>,
    /// Satoshis per deposit.
    #[arg(long)]
    amount: Option<u64>,
    /// Give covenant outputs timelocked refund branches.
    #[arg(long)]
    timelocked: bool,
    /// Make one party misbehave.
    #[arg(long, value_parser = parse_cheat)]
    cheat: Option<Cheat>,
    /// Put both parties' choices in the outcome report.
    #[arg(long)]
    introspect: bool,
}

#[derive(Args, Clone, Default)]
struct TraceArgs {
    /// Tree depth.
    #[arg(long)]
    depth: Option<u32>,
    /// Transition function (`add:N`, `mul:N`, `affine:M,C`); repeat for each branch.
    #[arg(long = "fn", value_parser = parse_fn)]
    fns: Vec<TransitionFn>,
    /// Path to execute, one digit per layer (`21`) or comma separated.
    #[arg(long, value_parser = parse_path)]
    path: Option<TracePath>,
    /// Lock the root with the owner key only, keeping the state off chain.
    #[arg(long)]
    defer_state: bool,
    /// Hidden state; derived from the seed when absent.
    #[arg(long)]
    state: Option<u64>,
}

impl TraceArgs {
    fn used(&self) -> bool {
        self.depth.is_some() || !self.fns.is_empty() || self.path.is_some() || self.defer_state || self.state.is_some()
    }

    fn apply(&self, cfg: &mut SessionConfig) {
        if let Some(d) = self.depth {
            cfg.trace.depth = d;
        }
        if !self.fns.is_empty() {
            cfg.trace.fns = self.fns.clone();
        }
        cfg.trace.path = self.path.clone();
        cfg.trace.defer_state = self.defer_state;
        cfg.trace.state = self.state.map(Scalar::from_u64);
    }
}

#[derive(Args)]
struct DemoArgs {
    /// covenant, oprand, thimbles or trace.
    #[arg(value_parser = parse_flow)]
    flow: Flow,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    game: GameArgs,
    #[command(flatten)]
    trace: TraceArgs,
    /// Transcript output path.
    #[arg(long, default_value = "transcript.json")]
    transcript: PathBuf,
    /// Skip writing the transcript.
    #[arg(long, conflicts_with = "transcript")]
    no_transcript: bool,
    /// Also dump the final ledger.
    #[arg(long)]
    ledger: Option<PathBuf>,
    /// Print the outcome report as JSON instead of the narrative.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct FairnessArgs {
    #[arg(long, default_value_t = 10_000)]
    sessions: usize,
    #[command(flatten)]
    seed: SeedArg,
    /// Write the summary for later `replay`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum LedgerCmd {
    /// Render a ledger dump.
    Inspect {
        file: PathBuf,
        /// Print the canonical JSON form.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum TraceCmd {
    /// Build a tree and print its public commitments (points only).
    Build {
        #[command(flatten)]
        seed: SeedArg,
        #[command(flatten)]
        trace: TraceArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fund a tree and spend one path layer by layer.
    Spend {
        #[command(flatten)]
        seed: SeedArg,
        #[command(flatten)]
        trace: TraceArgs,
        /// Spend sequence output, for `trace verify`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Public commitments output.
        #[arg(long)]
        commitments: Option<PathBuf>,
        #[arg(long)]
        transcript: Option<PathBuf>,
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Check a spend sequence against public commitments.
    Verify {
        #[arg(long)]
        commitments: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args)]
struct HostArgs {
    #[arg(long, value_parser = parse_flow, default_value = "thimbles")]
    flow: Flow,
    #[arg(long, default_value_t = 7878)]
    port: u16,
    /// Address to listen on.
    #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
    bind: IpAddr,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    game: GameArgs,
    #[command(flatten)]
    peer: PeerArgs,
}

#[derive(Args)]
struct JoinArgs {
    /// host:port of the challenger.
    #[arg(long)]
    connect: String,
    #[command(flatten)]
    seed: SeedArg,
    /// Accepter's guess, 1-based.
    #[arg(long)]
    y: Option<usize>,
    #[arg(long, value_parser = parse_cheat)]
    cheat: Option<Cheat>,
    #[command(flatten)]
    peer: PeerArgs,
}

#[derive(Args)]
struct PeerArgs {
    /// Milliseconds to wait for the peer before taking the abort path.
    #[arg(long, default_value_t = 30_000)]
    deadline_ms: u64,
    #[arg(long)]
    transcript: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

fn parse_flow(s: &str) -> Result<Flow, String> {
    s.parse()
}

fn parse_cheat(s: &str) -> Result<Cheat, String> {
    s.parse()
}

fn parse_fn(s: &str) -> Result<TransitionFn, String> {
    s.parse()
}

fn parse_path(s: &str) -> Result<TracePath, String> {
    s.parse()
}

/// A failure with its exit code.
struct Fail(u8, String);

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail(1, e.to_string())
    }
}

impl From<ProtocolError> for Fail {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::BadConfig(_) => Fail(EXIT_USAGE, e.to_string()),
            _ => Fail(1, e.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> Fail {
    Fail(EXIT_USAGE, msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Demo(a) => demo(a),
        Cmd::Replay { file } => cmd_replay(&file),
        Cmd::Fairness(a) => fairness(a),
        Cmd::Ledger { cmd: LedgerCmd::Inspect { file, json } } => inspect(&file, json),
        Cmd::Trace { cmd } => trace_cmd(cmd),
        Cmd::Host(a) => host(a),
        Cmd::Join(a) => join(a),
        Cmd::Daemon { port } => daemon(port),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Fail(code, msg)) => {
            eprintln!("randlock: {msg}");
            ExitCode::from(code)
        }
    }
}

fn game_config(flow: Flow, seed: &str, g: &GameArgs) -> SessionConfig {
    let mut cfg = SessionConfig::new(flow, seed);
    if let Some(n) = g.n {
        cfg.n = n;
    }
    if let Some(t1) = g.t1 {
        cfg.t1 = t1;
    }
    cfg.amount = g.amount;
    cfg.x = g.x;
    cfg.y = g.y;
    cfg.timelocked = g.timelocked;
    cfg.cheat = g.cheat;
    cfg.introspect = g.introspect;
    cfg
}

fn write(path: &Path, text: &str) -> Result<(), Fail> {
    fs::write(path, text).map_err(|e| Fail(1, format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<String, Fail> {
    fs::read_to_string(path).map_err(|e| Fail(1, format!("{}: {e}", path.display())))
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn label<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

fn btc(sat: u64) -> String {
    format!("{}.{:08} BTC", sat / 100_000_000, sat % 100_000_000)
}

fn print_report(r: &OutcomeReport) {
    println!("session {}  flow {}  status {}", r.session_id, r.flow, label(&r.status));
    if let Some(a) = &r.abort {
        println!("abort: {} at step {} by {}: {}", a.code, a.step, a.by.alias(), a.reason);
    }
    match r.accepter_won {
        Some(true) => println!("verdict: {} guessed right", Role::Accepter.alias()),
        Some(false) => println!("verdict: {} guessed wrong", Role::Accepter.alias()),
        None => println!("verdict: none"),
    }
    if let (Some(x), Some(y)) = (r.x, r.y) {
        println!("choices: x = {x}, y = {y}");
    }
    if let Some(w) = r.winner {
        println!("winner: {}", label(&w));
    }
    println!(
        "height {}  {} holds {}  {} holds {}{}",
        r.height,
        Role::Challenger.alias(),
        btc(r.balances.challenger),
        Role::Accepter.alias(),
        btc(r.balances.accepter),
        if r.reclaimed { "  (deposits reclaimed)" } else { "" }
    );
}

fn finish(report: &OutcomeReport) -> u8 {
    if report.status == SessionStatus::Aborted {
        EXIT_ABORT
    } else {
        0
    }
}

fn demo(a: DemoArgs) -> Result<u8, Fail> {
    let is_trace = a.flow == Flow::Trace;
    if a.trace.used() && !is_trace {
        return Err(usage("--depth, --fn, --path, --defer-state and --state only apply to the trace flow"));
    }
    let g = &a.game;
    if is_trace && (g.n.is_some() || g.x.is_some() || g.y.is_some() || g.cheat.is_some() || g.timelocked) {
        return Err(usage("-n, --x, --y, --cheat and --timelocked do not apply to the trace flow"));
    }
    let mut cfg = game_config(a.flow, &a.seed.seed, g);
    a.trace.apply(&mut cfg);

    let (transcript, notes, ledger) = if is_trace {
        let s = trace::run(&cfg)?;
        let notes: Vec<_> = s.notes.into_iter().map(|n| (Role::Challenger, n)).collect();
        (s.transcript, notes, s.ledger)
    } else {
        let run = run_local(&cfg)?;
        let ledger = run.party(Role::Challenger).ledger().clone();
        (run.transcript.expect("recorded"), run.notes, ledger)
    };
    if !a.no_transcript {
        write(&a.transcript, &transcript.to_json())?;
    }
    if let Some(p) = &a.ledger {
        write(p, &pretty(&ledger))?;
    }
    if a.json {
        print!("{}", pretty(&transcript.report));
    } else {
        for (role, note) in &notes {
            println!("[{}] {note}", role.alias());
        }
        println!();
        print_report(&transcript.report);
        if !a.no_transcript {
            println!("transcript: {}", a.transcript.display());
        }
    }
    Ok(finish(&transcript.report))
}

fn cmd_replay(path: &Path) -> Result<u8, Fail> {
    let text = read(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Fail(EXIT_VERIFY, format!("not JSON: {e}")))?;
    if value.get("kind").and_then(|k| k.as_str()) == Some(SUMMARY_KIND) {
        let stored: FairnessReport = serde_json::from_value(value).map_err(|e| Fail(EXIT_VERIFY, format!("bad summary: {e}")))?;
        verify_summary(&stored).map_err(|e| Fail(EXIT_VERIFY, format!("summary does not reproduce: {e}")))?;
        println!("ok: {} sessions regenerate {} accepter wins (rate {:.4})", stored.sessions, stored.accepter_wins, stored.rate);
        return Ok(0);
    }
    let t = Transcript::from_json(&text).map_err(|e| Fail(EXIT_VERIFY, format!("bad transcript: {e}")))?;
    match replay(&t) {
        Ok(s) => {
            println!(
                "ok: {} envelopes, {} proofs checked, {} transactions accepted{}{}",
                s.envelopes,
                s.proofs_checked,
                s.txs_accepted,
                if s.reexecuted { ", re-execution identical" } else { "" },
                match s.trace_verified {
                    Some(true) => ", trace verified",
                    _ => "",
                }
            );
            Ok(0)
        }
        Err(e) => Err(Fail(EXIT_VERIFY, format!("replay failed at event {}: {}", e.index, e.reason))),
    }
}

fn fairness(a: FairnessArgs) -> Result<u8, Fail> {
    if a.sessions == 0 {
        return Err(usage("--sessions must be at least 1"));
    }
    let r = run_fairness(a.sessions, &a.seed.seed)?;
    if let Some(p) = &a.out {
        write(p, &pretty(&r))?;
    }
    if a.json {
        print!("{}", pretty(&r));
        return Ok(0);
    }
    println!("{} sessions, seed {:?}", r.sessions, r.seed);
    println!("accepter wins {}  challenger wins {}  rate {:.4}", r.accepter_wins, r.sessions - r.accepter_wins, r.rate);
    println!("matrix (row x, column y; W = accepter wins):");
    for (x, row) in r.matrix.iter().enumerate() {
        let cells: Vec<_> = row.iter().map(|w| if *w { "W" } else { "-" }).collect();
        println!("  x={}  {}", x + 1, cells.join(" "));
    }
    Ok(0)
}

fn inspect(path: &Path, json: bool) -> Result<u8, Fail> {
    let ledger: LedgerState = serde_json::from_str(&read(path)?).map_err(|e| Fail(EXIT_VERIFY, format!("bad ledger dump: {e}")))?;
    if json {
        print!("{}", pretty(&ledger));
    } else {
        print!("{}", ledger.render());
    }
    Ok(0)
}

fn trace_config(seed: &str, t: &TraceArgs) -> SessionConfig {
    let mut cfg = SessionConfig::new(Flow::Trace, seed);
    t.apply(&mut cfg);
    cfg
}

fn trace_cmd(cmd: TraceCmd) -> Result<u8, Fail> {
    match cmd {
        TraceCmd::Build { seed, trace: t, out } => {
            let cfg = trace_config(&seed.seed, &t);
            cfg.validate()?;
            let owner = trace::owner_key(&cfg.party_seed(Role::Challenger));
            let tree = build_tree(owner.public(), trace::hidden_state(&cfg), cfg.trace.fns.clone(), cfg.trace.depth)
                .map_err(|e| usage(e.to_string()))?;
            let text = pretty(&tree.commitments(cfg.trace.defer_state));
            match out {
                Some(p) => {
                    write(&p, &text)?;
                    println!("{} nodes over {} layers, commitments in {}", tree.node_count(), tree.depth() + 1, p.display());
                }
                None => print!("{text}"),
            }
            Ok(0)
        }
        TraceCmd::Spend { seed, trace: t, out, commitments, transcript, ledger } => {
            let cfg = trace_config(&seed.seed, &t);
            let s = trace::run(&cfg)?;
            for n in &s.notes {
                println!("{n}");
            }
            if let Some(p) = out {
                write(&p, &pretty(&s.run))?;
            }
            if let Some(p) = commitments {
                write(&p, &pretty(&s.commitments))?;
            }
            if let Some(p) = transcript {
                write(&p, &s.transcript.to_json())?;
            }
            if let Some(p) = ledger {
                write(&p, &pretty(&s.ledger))?;
            }
            let ok = verify_trace(&s.run, &s.commitments);
            println!("path {}  spends {}  verify_trace {ok}", s.path, s.run.spends.len());
            Ok(if ok { 0 } else { EXIT_VERIFY })
        }
        TraceCmd::Verify { commitments, run } => {
            let c: PublicTreeCommitments = serde_json::from_str(&read(&commitments)?)
                .map_err(|e| Fail(EXIT_VERIFY, format!("bad commitments: {e}")))?;
            let r: TraceRun = serde_json::from_str(&read(&run)?).map_err(|e| Fail(EXIT_VERIFY, format!("bad run: {e}")))?;
            if verify_trace(&r, &c) {
                println!("ok: {} spends open the committed tree", r.spends.len());
                Ok(0)
            } else {
                Err(Fail(EXIT_VERIFY, "the spends do not open the committed tree".into()))
            }
        }
    }
}

fn peer_finish(t: &Transcript, args: &PeerArgs) -> Result<u8, Fail> {
    if let Some(p) = &args.transcript {
        write(p, &t.to_json())?;
    }
    if args.json {
        print!("{}", pretty(&t.report));
    } else {
        print_report(&t.report);
    }
    Ok(finish(&t.report))
}

fn host(a: HostArgs) -> Result<u8, Fail> {
    if a.flow == Flow::Trace {
        return Err(usage("the trace flow has no second player"));
    }
    let cfg = game_config(a.flow, &a.seed.seed, &a.game);
    cfg.validate()?;
    let listener = TcpTransport::bind(SocketAddr::new(a.bind, a.port)).map_err(|e| Fail(1, e.to_string()))?;
    let addr = listener.local_addr()?;
    eprintln!("session {} ({}) waiting on {addr}", cfg.session_id(), cfg.flow);
    let mut transport = TcpTransport::accept_one(&listener).map_err(|e| Fail(1, e.to_string()))?;
    let opts = PeerOptions { deadline: Duration::from_millis(a.peer.deadline_ms) };
    let run = run_host(&cfg, &mut transport, opts)?;
    peer_finish(&run.transcript, &a.peer)
}

fn join(a: JoinArgs) -> Result<u8, Fail> {
    let mut cfg = SessionConfig::new(Flow::Thimbles, a.seed.seed.clone());
    cfg.y = a.y;
    cfg.cheat = a.cheat;
    let mut transport = TcpTransport::connect(a.connect.as_str()).map_err(|e| Fail(1, format!("{}: {e}", a.connect)))?;
    let opts = PeerOptions { deadline: Duration::from_millis(a.peer.deadline_ms) };
    let run = run_join(&cfg, &mut transport, opts)?;
    peer_finish(&run.transcript, &a.peer)
}

fn daemon(port: u16) -> Result<u8, Fail> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = randlock_daemon::bind(port).await.map_err(|e| Fail(1, e.to_string()))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        randlock_daemon::serve(listener, randlock_daemon::AppState::new(), Duration::from_millis(100))
            .await
            .map_err(|e| Fail(1, e.to_string()))?;
        Ok(0)
    })
}
