use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;
use vmobf::attacks::REPORT_FIELDS;
use vmobf::expr::Assignment;
use vmobf::obfuscate::HandlerSet;
use vmobf::vm::BytecodeProgram;

const TOY: &str = "func toy(a, b) {\n t = a + b\n return t\n}\n";

fn vmobf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vmobf"))
        .args(args)
        .output()
        .expect("spawn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Depth-5 database shared by every test in this binary.
fn db() -> &'static Path {
    static DB: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    let (_, p) = DB.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("db.mbadb");
        let o = vmobf(&[
            "synth-db",
            "--depth",
            "5",
            "--seed",
            "7",
            "--out",
            p.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (dir, p)
    });
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn obfuscate(dir: &Path, program: &str, out: &str, extra: &[&str]) -> (PathBuf, String) {
    let src = dir.join(format!("{out}.tac"));
    fs::write(&src, program).unwrap();
    let bc = dir.join(format!("{out}.lvm"));
    let mut args = vec!["obfuscate", s(&src), "--db", s(db()), "--out", s(&bc)];
    args.extend_from_slice(extra);
    let o = vmobf(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (bc, stdout(&o))
}

fn field(line: &str, name: &str) -> usize {
    let mut it = line.split_whitespace();
    while let Some(w) = it.next() {
        if w == name {
            return it.next().unwrap().parse().unwrap();
        }
    }
    panic!("no {name} in {line}")
}

#[test]
fn synth_db_depth_three() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("d3.mbadb");
    let o = vmobf(&["synth-db", "--depth", "3", "--seed", "1", "--out", s(&p)]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("classes "));
    assert!(p.exists());
    let o = vmobf(&[
        "synth-db",
        "--depth",
        "7",
        "--max-expressions",
        "100",
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn obfuscated_toy_verifies() {
    let dir = TempDir::new().unwrap();
    let (bc, _) = obfuscate(dir.path(), TOY, "toy", &["--seed", "3"]);
    let o = vmobf(&[
        "verify",
        s(&dir.path().join("toy.tac")),
        s(&bc),
        "--inputs",
        "2000",
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("PASS tested "));
}

#[test]
fn plain_handlers_are_smaller() {
    let dir = TempDir::new().unwrap();
    let src = fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../core/programs/checksum.tac"
    ))
    .unwrap();
    let (_, mba) = obfuscate(dir.path(), &src, "mba", &["--seed", "4"]);
    let (_, plain) = obfuscate(dir.path(), &src, "plain", &["--seed", "4", "--no-mba"]);
    assert!(
        2 * field(&plain, "handler_ops") <= field(&mba, "handler_ops"),
        "{plain} vs {mba}"
    );
}

#[test]
fn same_seed_same_bytes() {
    let dir = TempDir::new().unwrap();
    let (a, _) = obfuscate(dir.path(), TOY, "a", &["--seed", "9"]);
    let (b, _) = obfuscate(dir.path(), TOY, "b", &["--seed", "9"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        fs::read(dir.path().join("a.lvm.json")).unwrap(),
        fs::read(dir.path().join("b.lvm.json")).unwrap()
    );
}

#[test]
fn corrupted_keys_fail_verification() {
    let dir = TempDir::new().unwrap();
    let (bc, _) = obfuscate(dir.path(), TOY, "toy", &["--seed", "5"]);
    let mut p = BytecodeProgram::decode(&fs::read(&bc).unwrap()).unwrap();
    // Point functions are only constrained on the key set, so point every
    // step at another valid key whose slot computes something else.
    let hs = HandlerSet::from_json(&fs::read_to_string(dir.path().join("toy.lvm.json")).unwrap())
        .unwrap();
    for st in p.steps.clone() {
        let Some(h) = hs.get(st.handler_id as usize) else {
            continue;
        };
        let k = p.key_pool[st.key_idx as usize];
        let Some(cur) = h.slot_for_key(k) else {
            continue;
        };
        let probe = |i: usize| h.slots[i].sem.expr.eval(&Assignment::new(3, 5, 7, 0));
        let other = (0..h.slots.len())
            .find(|&i| probe(i) != probe(cur))
            .unwrap();
        p.key_pool[st.key_idx as usize] = h.key_set.keys[other];
    }
    fs::write(&bc, p.encode()).unwrap();
    let tac = dir.path().join("toy.tac");
    let o = vmobf(&["verify", s(&tac), s(&bc), "--inputs", "500"]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.starts_with("FAIL"), "{out}");
    let input = out
        .split_whitespace()
        .skip_while(|w| *w != "input")
        .nth(1)
        .unwrap()
        .to_string();
    let o = vmobf(&["verify", s(&tac), s(&bc), "--input", &input]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn attack_reports() {
    let dir = TempDir::new().unwrap();
    let (bc, _) = obfuscate(dir.path(), TOY, "toy", &["--seed", "6"]);
    let o = vmobf(&["attack", s(&bc), "--attacks", "taint,fuzz"]);
    assert_eq!(o.status.code(), Some(2));

    let report = dir.path().join("r.jsonl");
    let o = vmobf(&[
        "attack",
        s(&bc),
        "--mode",
        "static",
        "--attacks",
        "taint,slice,symex",
        "--report",
        s(&report),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert!(!text.is_empty());
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let obj = v.as_object().unwrap();
        for f in REPORT_FIELDS {
            assert!(obj.contains_key(f), "{f} missing: {line}");
        }
        assert_eq!(obj["mode"], "static");
        if obj["attack"] == "symex" {
            assert_eq!(obj["success"], false);
        }
    }
}

#[test]
fn bench_tiny_suite() {
    let dir = TempDir::new().unwrap();
    let suite = dir.path().join("tiny.toml");
    fs::write(
        &suite,
        "criteria = [3, 5]\ndb_depth = 4\ndeterminism_depth = 3\nhandlers = 20\n",
    )
    .unwrap();
    let csv = dir.path().join("out.csv");
    let o = vmobf(&["bench", s(&suite), "--out", s(&csv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "criterion,name,pass,measured,threshold,seconds");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("3,db_determinism,true,"));
    assert!(lines[2].starts_with("5,point_property,true,"));

    fs::write(&suite, "criteria = [14]\n").unwrap();
    assert!(!vmobf(&["bench", s(&suite)]).status.success());
}
