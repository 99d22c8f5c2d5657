use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_floquet-ris"))
        .args(args.split_whitespace())
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn scenario(dir: &Path) {
    std::fs::write(
        dir.join("config.json"),
        r#"{"gt_harmonics": 5, "retained_harmonics": 3, "n_t": 2, "n_r": 2, "n_s": 2, "n_states": 3}"#,
    )
    .unwrap();
    let out = run(dir, "generate --config config.json --out scenario.json");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_produces_readable_payloads() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scenario(d);
    for args in [
        "campaign --scenario scenario.json --mode m3 --k 4 --q 3 --noiseless --out campaign.json",
        "step1 --scenario scenario.json --surrogate --out proxies.json",
        "align --proxies proxies.json --campaign campaign.json --iters 20 --out result.json",
        "zeta --scenario scenario.json --result result.json --mode m3 --patterns 8 --q 3 --out zeta.json",
        "gain --scenario scenario.json --model gt --tx 0 --rx 0 --q 2 --out gain.json",
    ] {
        let out = run(d, args);
        assert!(out.status.success(), "{args}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["campaign.json", "proxies.json", "result.json", "zeta.json", "gain.json"] {
        let text = std::fs::read_to_string(d.join(f)).unwrap();
        serde_json::from_str::<serde_json::Value>(&text).unwrap();
    }
    let zeta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("zeta.json")).unwrap()).unwrap();
    assert!(zeta["zeta_db"].is_number());
}

#[test]
fn seeds_change_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scenario(d);
    let campaign = "campaign --scenario scenario.json --mode m1 --k 3 --q 2 --snr-db 20";
    assert!(run(d, &format!("{campaign} --out a.json --seed 1")).status.success());
    assert!(run(d, &format!("{campaign} --out b.json --seed 2")).status.success());
    assert_ne!(
        std::fs::read(d.join("a.json")).unwrap(),
        std::fs::read(d.join("b.json")).unwrap()
    );
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |args: &str| run(d, args).status.code();
    // unreadable input
    assert_eq!(code("generate --config missing.json --out s.json"), Some(4));
    // invalid configuration
    std::fs::write(d.join("bad.json"), r#"{"gt_harmonics": 4}"#).unwrap();
    let out = run(d, "generate --config bad.json --out s.json");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gt_harmonics"));
    // unknown keys
    std::fs::write(d.join("typo.json"), r#"{"n_elements": 4}"#).unwrap();
    assert_eq!(code("generate --config typo.json --out s.json"), Some(2));
    // usage errors
    assert_eq!(code("campaign --mode m4"), Some(2));
    scenario(d);
    assert_eq!(
        code("gain --scenario scenario.json --model gt --tx 7 --rx 0 --q 2"),
        Some(2)
    );
}
