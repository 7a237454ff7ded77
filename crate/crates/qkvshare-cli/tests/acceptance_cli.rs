//! CLI acceptance gate: byte-identical reports across consecutive runs for
//! every subcommand, the exit-code contract, and a live serve/send pair.

use std::fs;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_qkvshare");

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

/// Run a command expected to succeed and hand back its stdout bytes.
fn run_ok(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "`{}` failed: {}\n{}",
        args.join(" "),
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

/// Run the same invocation twice; stdout must match byte for byte. When
/// `out_file` is given, each run writes through a distinct path and the
/// two written files must match too. Returns the first run's stdout.
fn assert_deterministic(dir: &Path, args: &[&str], out_file: Option<&str>) -> Vec<u8> {
    let (first, second) = match out_file {
        None => (run_ok(dir, args), run_ok(dir, args)),
        Some(name) => {
            let path_a = format!("{name}.a");
            let path_b = format!("{name}.b");
            let mut with_out = args.to_vec();
            with_out.extend(["--out", &path_a]);
            let first = run_ok(dir, &with_out);
            with_out.truncate(args.len());
            with_out.extend(["--out", &path_b]);
            let second = run_ok(dir, &with_out);
            let bytes_a = fs::read(dir.join(&path_a)).unwrap();
            let bytes_b = fs::read(dir.join(&path_b)).unwrap();
            assert_eq!(
                bytes_a,
                bytes_b,
                "`{}` wrote different bytes on the second run",
                args.join(" ")
            );
            // Keep the first output under the bare name for later steps.
            fs::rename(dir.join(&path_a), dir.join(name)).unwrap();
            (first, second)
        }
    };
    assert_eq!(
        first,
        second,
        "`{}` printed different reports on the second run",
        args.join(" ")
    );
    first
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

// ---------------------------------------------------------------------------
// criterion 9 — every subcommand reports byte-identically across two runs
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_every_subcommand_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    write(dir, "quant.conf", "bits=4\n");
    write(
        dir,
        "adaptive.conf",
        "method=adaptive_local\nbudget_bits_per_token=6\nposition_offset=42\n",
    );
    write(
        dir,
        "handoff.conf",
        "agents=3\nmethod=adaptive_local\npolicy=requantize_each_hop\ntokens=24\n",
    );
    write(
        dir,
        "ttft.conf",
        "contexts=tiny:16,small:32\ntrials=2\nwarmup=0\n",
    );
    write(
        dir,
        "sweep.conf",
        "tokens=16\nhops=2,3\nbudgets=4,8\nmethods=fp16_share,uniform_q4,adaptive_local\n",
    );
    write(dir, "density.conf", "device_gib=12\noverhead_bytes=1024\n");

    // synth → container; the container feeds the card pipeline below.
    assert_deterministic(dir, &["synth", "--seed", "11"], Some("cache.qkvt"));

    // quantize: report + card file.
    assert_deterministic(
        dir,
        &["quantize", "cache.qkvt", "--config", "quant.conf"],
        Some("card.qkvc"),
    );
    assert_deterministic(
        dir,
        &[
            "quantize",
            "cache.qkvt",
            "--config",
            "quant.conf",
            "--format",
            "csv",
        ],
        None,
    );

    // card encode / decode / stats.
    assert_deterministic(
        dir,
        &["card", "encode", "cache.qkvt", "--config", "adaptive.conf"],
        Some("adaptive.qkvc"),
    );
    assert_deterministic(dir, &["card", "decode", "card.qkvc"], Some("back.qkvt"));
    assert_deterministic(dir, &["card", "stats", "card.qkvc"], None);
    assert_deterministic(
        dir,
        &["card", "stats", "adaptive.qkvc", "--format", "csv"],
        None,
    );

    // handoff run, both formats, timings redacted so wall-clock noise
    // cannot leak into the comparison.
    let hops_json = assert_deterministic(
        dir,
        &[
            "handoff",
            "run",
            "--seed",
            "7",
            "--config",
            "handoff.conf",
            "--redact-timings",
        ],
        None,
    );
    assert!(!hops_json.is_empty());
    assert_deterministic(
        dir,
        &[
            "handoff",
            "run",
            "--seed",
            "7",
            "--config",
            "handoff.conf",
            "--redact-timings",
            "--format",
            "csv",
        ],
        None,
    );

    // bench ttft (timings redacted) and bench sweep, stdout and --out.
    assert_deterministic(
        dir,
        &[
            "bench",
            "ttft",
            "--seed",
            "71",
            "--config",
            "ttft.conf",
            "--redact-timings",
        ],
        None,
    );
    assert_deterministic(
        dir,
        &["bench", "sweep", "--seed", "101", "--config", "sweep.conf"],
        None,
    );
    assert_deterministic(
        dir,
        &[
            "bench",
            "sweep",
            "--seed",
            "101",
            "--config",
            "sweep.conf",
            "--format",
            "csv",
        ],
        Some("sweep.csv"),
    );

    // density, both formats.
    assert_deterministic(dir, &["density", "--config", "density.conf"], None);
    assert_deterministic(
        dir,
        &["density", "--config", "density.conf", "--format", "csv"],
        None,
    );

    // The decoded container must reconstruct through the same codec the
    // encoder used: re-quantizing it reproduces the identical card.
    let requant = run_ok(
        dir,
        &[
            "quantize",
            "back.qkvt",
            "--config",
            "quant.conf",
            "--out",
            "again.qkvc",
        ],
    );
    assert!(!requant.is_empty());
    assert_eq!(
        fs::read(dir.join("card.qkvc")).unwrap(),
        fs::read(dir.join("again.qkvc")).unwrap(),
        "re-quantizing a reconstruction must reproduce the card (idempotent grid)"
    );

    println!("criterion 9: PASS — all subcommand reports byte-identical across two runs");
}

// ---------------------------------------------------------------------------
// exit-code contract: 0 success, 2 usage, 3 data/format, 4 protocol
// ---------------------------------------------------------------------------

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run_ok(dir, &["synth", "--seed", "3", "--out", "cache.qkvt"]);
    run_ok(
        dir,
        &["quantize", "cache.qkvt", "--out", "card.qkvc"],
    );

    let code = |args: &[&str]| run_in(dir, args).status.code().unwrap();

    // Usage errors → 2.
    assert_eq!(code(&["synth"]), 2, "synth without --out is a usage error");
    write(dir, "bogus.conf", "no_such_key=1\n");
    assert_eq!(
        code(&["synth", "--config", "bogus.conf", "--out", "x.qkvt"]),
        2,
        "unknown config key is a usage error"
    );
    write(dir, "conflict.conf", "bits=4\nmethod=adaptive_local\n");
    assert_eq!(
        code(&["quantize", "cache.qkvt", "--config", "conflict.conf"]),
        2,
        "bits and method together are a usage error"
    );
    assert_eq!(code(&["no-such-command"]), 2, "unknown subcommand");

    // Data/format errors → 3.
    assert_eq!(
        code(&["quantize", "missing.qkvt"]),
        3,
        "missing input file is a data error"
    );
    write(dir, "garbage.qkvc", "not a card at all");
    assert_eq!(
        code(&["card", "stats", "garbage.qkvc"]),
        3,
        "corrupt card is a data error"
    );
    let card = fs::read(dir.join("card.qkvc")).unwrap();
    fs::write(dir.join("truncated.qkvc"), &card[..card.len() / 2]).unwrap();
    assert_eq!(
        code(&["card", "decode", "truncated.qkvc", "--out", "y.qkvt"]),
        3,
        "truncated card is a data error"
    );

    // Protocol errors → 4.
    write(dir, "deadport.conf", "port=47321\nconnect_timeout_ms=100\n");
    assert_eq!(
        code(&["send", "card.qkvc", "--config", "deadport.conf"]),
        4,
        "unreachable peer is a protocol error"
    );

    println!("exit codes: PASS — 2/3/4 all observed where contracted");
}

// ---------------------------------------------------------------------------
// serve/send over loopback, twice: transfer is byte-exact and the two
// exchanges report identically.
// ---------------------------------------------------------------------------

#[test]
fn serve_send_pair_transfers_byte_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run_ok(dir, &["synth", "--seed", "19", "--out", "cache.qkvt"]);
    run_ok(dir, &["quantize", "cache.qkvt", "--out", "card.qkvc"]);
    let sent = fs::read(dir.join("card.qkvc")).unwrap();

    let mut exchanges = Vec::new();
    for (round, port) in ["47741", "47742"].iter().enumerate() {
        let conf = format!("exchange-{round}.conf");
        write(dir, &conf, &format!("port={port}\n"));
        let received_name = format!("received-{round}.qkvc");
        let mut serve = Command::new(BIN)
            .args([
                "serve",
                "--config",
                &conf,
                "--out",
                &received_name,
            ])
            .current_dir(dir)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .expect("serve spawns");

        // `send` retries the connect within its timeout, so no sleep is
        // needed between spawning the server and dialing it.
        let send_out = run_in(dir, &["send", "card.qkvc", "--config", &conf]);
        if !send_out.status.success() {
            let _ = serve.kill();
            panic!(
                "send failed on round {round}: {}",
                String::from_utf8_lossy(&send_out.stderr)
            );
        }
        let serve_out = serve.wait_with_output().expect("serve exits");
        assert!(
            serve_out.status.success(),
            "serve failed on round {round}: {}",
            String::from_utf8_lossy(&serve_out.stderr)
        );

        let received = fs::read(dir.join(&received_name)).unwrap();
        assert_eq!(received, sent, "round {round}: transfer not byte-exact");
        exchanges.push((send_out.stdout, serve_out.stdout));
    }
    assert_eq!(
        exchanges[0], exchanges[1],
        "the two exchanges must report identically"
    );

    let serve_report: serde_json::Value = serde_json::from_slice(&exchanges[0].1).unwrap();
    assert_eq!(serve_report["model_id"], "toy-v1");
    assert_eq!(serve_report["card_bytes"], sent.len() as u64);

    println!("serve/send: PASS — two loopback exchanges byte-exact and identically reported");
}
