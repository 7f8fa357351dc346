//! The `mcforge` binary, driven as a user would.

mod common;

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::thread;

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_mcforge");

fn mcforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("MCFORGE_API_KEY")
        .env_remove("MCFORGE_EMBED_KEY")
        .stdin(Stdio::null())
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json_of(out: &Output) -> Value {
    serde_json::from_str(&ok(out)).unwrap()
}

fn single_error_line(out: &Output) -> String {
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    err
}

/// Template, parameters and a config file in `dir`; returns the config path.
fn project(dir: &Path, extra: &str) -> String {
    common::write_inputs(dir);
    let cfg = dir.join("mcforge.toml");
    fs::write(
        &cfg,
        format!(
            "[paths]\ntemplate = \"example_template.inp\"\nparams = \"parameters.csv\"\noutput_dir = \"run\"\n\n\
             [workflow]\nprefix = \"example\"\ncycles = 5\nuncertainty_target = 10.0\nmonitor_unit = 46\nauto_approve = true\n\n{extra}"
        ),
    )
    .unwrap();
    cfg.to_string_lossy().into_owned()
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = mcforge(dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(mcforge(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(mcforge(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn secrets_cannot_be_passed_as_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = mcforge(dir.path(), &["workflow", "--api-key", "k"]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = project(dir.path(), "[llm]\napi_key = \"k\"\n");
    let out = mcforge(dir.path(), &["--config", &cfg, "workflow"]);
    assert_eq!(out.status.code(), Some(2));
    single_error_line(&out);
}

#[test]
fn stats_nps_reproduces_the_refinement_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = mcforge(dir.path(), &["stats", "nps", "--current-u", "12.5", "--target-u", "10", "--nps", "1000000"]);
    assert_eq!(ok(&out).trim(), "1600000");
    let v = json_of(&mcforge(
        dir.path(),
        &["--json", "stats", "nps", "--current-u", "12.5", "--target-u", "10", "--nps", "1000000"],
    ));
    assert_eq!(v["required_nps"], 1_600_000);

    let bad = mcforge(dir.path(), &["--json", "stats", "nps", "--current-u", "12.5", "--target-u", "0", "--nps", "1"]);
    assert_eq!(bad.status.code(), Some(1));
    single_error_line(&bad);
    let v: Value = serde_json::from_slice(&bad.stdout).unwrap();
    assert_eq!(v["exit_code"], 1);
    assert!(v["error"].as_str().unwrap().contains("target"));
}

#[test]
fn stage_by_stage_with_mock_engine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = project(dir.path(), "");
    let d = dir.path();
    let run = d.join("run");

    let gen = json_of(&mcforge(d, &["--json", "--config", &cfg, "gen"]));
    assert_eq!(gen["files"].as_array().unwrap().len(), 5);
    assert!(run.join("example_05.inp").is_file());

    let r = json_of(&mcforge(d, &["--json", "--config", &cfg, "run", "--engine", "mock"]));
    assert_eq!(r["succeeded"], true);
    assert_eq!(r["records"].as_array().unwrap().len(), 5);

    let dec = json_of(&mcforge(d, &["--json", "--config", &cfg, "decrypt", "--cycles", "5"]));
    assert_eq!(dec["listings"].as_array().unwrap().len(), 4);

    let st = json_of(&mcforge(d, &["--json", "--config", &cfg, "store"]));
    assert_eq!(st["entries"].as_array().unwrap().len(), 4);
    let store = run.join("fluka_data.json");
    let store_s = store.to_string_lossy().into_owned();

    let tab = run.join("output_fort_46_tab.lis");
    let unc = json_of(&mcforge(d, &["--json", "stats", "avg-unc", "--tab", tab.to_str().unwrap()]));
    let data: Value = serde_json::from_str(&fs::read_to_string(&store).unwrap()).unwrap();
    let stored = data["output_fort_46_tab.lis"]["average_uncertainty"].as_f64().unwrap();
    assert!((unc["average_uncertainty"].as_f64().unwrap() - stored).abs() < 1e-9 * stored);

    let e = json_of(&mcforge(
        d,
        &["--json", "stats", "avg-energy", "--store", &store_s, "--key", "output_fort_46_tab.lis"],
    ));
    assert!(e["average_energy_gev"].as_f64().unwrap() > 0.0);

    let micro_out = d.join("micro");
    let tab17 = run.join("output_fort_17_tab.lis");
    let m = json_of(&mcforge(
        d,
        &["--json", "micro", "--tab", tab17.to_str().unwrap(), "--bins-per-decade", "30", "--out", micro_out.to_str().unwrap()],
    ));
    assert!(m["summary"]["y_f"].as_f64().unwrap() <= m["summary"]["y_d"].as_f64().unwrap());
    assert!(micro_out.join("ydy_spectrum.svg").is_file());

    let p = json_of(&mcforge(d, &["--json", "plot", "--store", &store_s, "--semilogx"]));
    assert_eq!(p["plots"].as_array().unwrap().len(), 4);

    let missing = mcforge(d, &["stats", "avg-unc", "--store", &store_s, "--key", "nope.lis"]);
    assert_eq!(missing.status.code(), Some(2));
    single_error_line(&missing);
}

#[test]
fn external_engine_and_utilities_through_subprocesses() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let utilities = ["usxsuw", "ustsuw", "usbsuw", "detsuw", "usrsuw", "usysuw"]
        .iter()
        .zip(["USRBDX", "USRTRACK", "USRBIN", "DETECT", "RESNUCLE", "USRYIELD"])
        .map(|(name, card)| format!("{name} = \"{BIN} mock-util {card}\"\n"))
        .collect::<String>();
    let extra = format!(
        "[run]\nengine = \"external\"\nexecutable = \"{BIN} mock-engine\"\n\n[decrypt]\nbackend = \"external\"\n\n[decrypt.utilities]\n{utilities}"
    );
    let cfg = project(d, &extra);
    ok(&mcforge(d, &["--config", &cfg, "gen"]));
    ok(&mcforge(d, &["--config", &cfg, "run"]));
    let run = d.join("run");
    assert!(run.join("example_01001_fort.46").is_file());
    ok(&mcforge(d, &["--config", &cfg, "decrypt", "--cycles", "5"]));
    let log = fs::read_to_string(run.join("decryption_logs")).unwrap();
    assert!(log.contains("mock-util USRBDX"));
    assert!(run.join("output_fort_46_tab.lis").is_file());
}

#[test]
fn full_workflow_with_mock_engine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = project(dir.path(), "");
    let v = json_of(&mcforge(dir.path(), &["--json", "--config", &cfg, "workflow", "--engine", "mock"]));
    let steps: Vec<&str> = v["state"]["trace"].as_array().unwrap().iter().map(|e| e["step"].as_str().unwrap()).collect();
    assert_eq!(steps.first(), Some(&"Generate"));
    assert_eq!(steps.last(), Some(&"Finish"));
    let run = dir.path().join("run");
    for f in ["fluka_data.json", "workflow_trace.json", "output_fort_46_tab.svg", "example_01.inp"] {
        assert!(run.join(f).is_file(), "{f}");
    }

    let micro = tempfile::tempdir().unwrap();
    let cfg = project(micro.path(), "[micro]\nbins_per_decade = 30\n");
    let text = ok(&mcforge(
        micro.path(),
        &["--config", &cfg, "workflow", "--mode", "microdosimetry", "--target", "100"],
    ));
    assert!(text.contains("Rebin -> Analyze -> Finish"), "{text}");
    assert!(micro.path().join("run/micro_summary.json").is_file());
}

/// Answers chat completions on a local port until the test process exits.
fn chat_server(mut reply: impl FnMut(&Value) -> Value + Send + 'static) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let mut length = 0usize;
            loop {
                line.clear();
                reader.read_line(&mut line).unwrap();
                if line.trim_end().is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        length = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0u8; length];
            reader.read_exact(&mut body).unwrap();
            let payload = reply(&serde_json::from_slice(&body).unwrap()).to_string();
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    url
}

fn completion(message: Value) -> Value {
    json!({ "choices": [{ "index": 0, "message": message }] })
}

#[test]
fn workflow_driven_by_a_chat_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = project(dir.path(), "");
    let url = chat_server(|req| {
        let messages = req["messages"].as_array().unwrap();
        let turn = messages.iter().filter(|m| m["role"] == "assistant").count();
        let last: Value = messages
            .iter()
            .rev()
            .find(|m| m["role"] == "tool")
            .map(|m| serde_json::from_str(m["content"].as_str().unwrap()).unwrap())
            .unwrap_or(Value::Null);
        let (name, args) = match turn {
            0 => ("create_input_files", json!({})),
            1 => ("execute_simulations", json!({})),
            2 => ("decrypt_outputs", json!({})),
            3 => ("build_data_store", json!({})),
            4 => ("extract_uncertainty", json!({})),
            5 => ("plot_data", json!({ "log_scale": last["below_target"] == true })),
            _ => return completion(json!({ "role": "assistant", "content": "All done." })),
        };
        completion(json!({
            "role": "assistant",
            "content": null,
            "tool_calls": [{
                "id": format!("call_{turn}"),
                "type": "function",
                "function": { "name": name, "arguments": args.to_string() }
            }]
        }))
    });
    let v = json_of(&mcforge(
        dir.path(),
        &["--json", "--config", &cfg, "workflow", "--llm", "--llm-url", &url, "--model", "m"],
    ));
    let steps: Vec<&str> = v["state"]["trace"].as_array().unwrap().iter().map(|e| e["step"].as_str().unwrap()).collect();
    assert_eq!(
        steps,
        ["Generate", "Execute", "Decrypt", "Store", "CheckUncertainty", "Plot", "Finish"]
    );
}

#[test]
fn assistant_ingest_and_ask() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let docs = d.join("docs");
    fs::create_dir_all(&docs).unwrap();
    fs::write(docs.join("notes.md"), "The RANDOMIZ card sets the random number seed of a run.").unwrap();
    fs::write(docs.join("other.txt"), "USRBIN scores quantities on a spatial mesh.").unwrap();
    let cfg = d.join("assist.toml");
    fs::write(&cfg, "[assistant]\ndocs = \"docs\"\nstore = \"store\"\nk = 1\n").unwrap();
    let cfg = cfg.to_str().unwrap();

    let first = json_of(&mcforge(d, &["--json", "--config", cfg, "assist", "ingest"]));
    assert_eq!(first, json!({ "new_docs": 2, "new_chunks": 2 }));
    let again = json_of(&mcforge(d, &["--json", "--config", cfg, "assist", "ingest"]));
    assert_eq!(again, json!({ "new_docs": 0, "new_chunks": 0 }));

    let ans = json_of(&mcforge(
        d,
        &["--json", "--config", cfg, "assist", "ask", "--echo", "--question", "Which card sets the seed?"],
    ));
    assert_eq!(ans["cited"].as_array().unwrap().len(), 1);
    assert!(ans["text"].as_str().unwrap().starts_with("Which card sets the seed?"));

    let url = chat_server(|req| {
        let system = req["messages"][0]["content"].as_str().unwrap();
        let reply = if system.contains("RANDOMIZ") { "RANDOMIZ" } else { "unknown" };
        completion(json!({ "role": "assistant", "content": reply }))
    });
    let text = ok(&mcforge(
        d,
        &["--config", cfg, "assist", "ask", "--chat-url", &url, "--question", "Which card sets the seed?"],
    ));
    assert_eq!(text.trim(), "RANDOMIZ");

    let empty = mcforge(d, &["assist", "ask", "--echo", "--store", "nowhere", "--question", "q"]);
    assert_eq!(empty.status.code(), Some(1));
    assert!(single_error_line(&empty).contains("empty"));
}

#[test]
fn relative_paths_follow_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("project");
    let cfg = project(&sub, "");
    // Run from the parent; the config's relative paths still resolve.
    ok(&mcforge(dir.path(), &["--config", &cfg, "gen"]));
    assert!(sub.join("run/example_01.inp").is_file());
    let out = mcforge(dir.path(), &["gen"]);
    assert_eq!(out.status.code(), Some(2));
    single_error_line(&out);
}
