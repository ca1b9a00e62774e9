//! End-to-end tests of the `gridauth` binary, one or more per exit code.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SITE: &str = r#"policy "site" source resource {
  trust vo "fusion";
  subject any { allow action start, status, suspend, resume, cancel; }
}
"#;

const FUSION: &str = r#"policy "fusion" source vo {
  allocation 1000 cpu-seconds;
  member-quota "/O=Grid/CN=alice" 600 cpu-seconds;
  subject group "analysts" {
    allow action start;
    attr executable in {"/opt/vo/apps/transp"};
    require attr executable;
    attr count range 1..512;
  }
  subject identity "/O=Grid/CN=carol" {
    allow action suspend, cancel on jobtag "fusion-prod";
  }
}
"#;

const KEYS: &str = "fusion 000102030405060708090a0b0c0d0e0f101112131415161718191a1b1c1d1e1f\n";

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        f.write("site.pol", SITE);
        f.write("fusion.pol", FUSION);
        f.write("keys", KEYS);
        f.write("gridmap", "\"/O=Grid/CN=alice\" alice\n");
        f.write(
            "alice.cred",
            "subject: /O=Grid/CN=alice\nvo: fusion\ngroups: analysts\nexpiry: 4102444800\n",
        );
        f.write("carol.cred", "subject: /O=Grid/CN=carol\nvo: fusion\ngroups: admins\nexpiry: 4102444800\n");
        f.write("bob.cred", "subject: /O=Grid/CN=bob\nvo: fusion\ngroups: analysts\nexpiry: 4102444800\n");
        f.write("ok.rsl", r#"&(executable="/opt/vo/apps/transp")(count=2)(maxcputime=100)(jobtag="fusion-prod")"#);
        f.write("bad-exe.rsl", r#"&(executable="/bin/sh")(count=2)(maxcputime=100)"#);
        f.write("malformed.rsl", "&(executable=");
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) {
        fs::write(self.path(name), text).unwrap();
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_gridauth"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

const PULL: [&str; 4] = ["--resource-policy", "site.pol", "--vo-policy", "fusion.pol"];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn check_permit_deny_and_input_error() {
    let f = Fixture::new();
    let ok = f.run(&with(&["check"], &with(&PULL, &["--cred", "alice.cred", "--rsl", "ok.rsl"])));
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    assert_eq!(stdout(&ok), "decision: permit\n");

    let deny = f.run(&with(&["check", "--explain"], &with(&PULL, &["--cred", "alice.cred", "--rsl", "bad-exe.rsl"])));
    assert_eq!(code(&deny), 1);
    assert_eq!(
        stdout(&deny),
        "decision: deny\nresource/block[0]: permit\nvo/block[0]: deny — attr 'executable' value \"/bin/sh\" fails in {\"/opt/vo/apps/transp\"}\ncharged-estimate: 200 cpu-seconds\n"
    );

    let malformed = f.run(&with(&["check"], &with(&PULL, &["--cred", "alice.cred", "--rsl", "malformed.rsl"])));
    assert_eq!(code(&malformed), 2);
    assert!(stderr(&malformed).contains("malformed.rsl"));

    let missing = f.run(&with(&["check"], &with(&PULL, &["--cred", "nobody.cred", "--rsl", "ok.rsl"])));
    assert_eq!(code(&missing), 2);

    let usage = f.run(&["check", "--bogus"]);
    assert_eq!(code(&usage), 2);
}

#[test]
fn check_management_and_expiry() {
    let f = Fixture::new();
    let base = with(&["check"], &with(&PULL, &["--cred", "carol.cred", "--action", "suspend"]));
    let tagged = f.run(&with(&base, &["--jobtag", "fusion-prod", "--owner", "/O=Grid/CN=alice"]));
    assert_eq!(code(&tagged), 0);
    let untagged = f.run(&with(&base, &["--owner", "/O=Grid/CN=alice"]));
    assert_eq!(code(&untagged), 1);
    let with_rsl = f.run(&with(&base, &["--rsl", "ok.rsl"]));
    assert_eq!(code(&with_rsl), 2);

    let expired = f.run(&with(
        &["check", "--now", "4102444800"],
        &with(&PULL, &["--cred", "alice.cred", "--rsl", "ok.rsl"]),
    ));
    assert_eq!(code(&expired), 1);
    assert!(stderr(&expired).contains("expired"));
}

#[test]
fn push_mode_through_the_binary() {
    let f = Fixture::new();
    let issue = f.run(&[
        "issue-cap", "--vo-policy", "fusion.pol", "--cred", "alice.cred", "--keys", "keys", "--expiry", "100",
        "--out", "alice.cap",
    ]);
    assert_eq!(code(&issue), 0, "{}", stderr(&issue));
    let push = ["--resource-policy", "site.pol", "--cap", "alice.cap", "--keys", "keys"];
    let ok = f.run(&with(&["check"], &with(&push, &["--cred", "alice.cred", "--rsl", "ok.rsl"])));
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let stale = f.run(&with(&["check", "--now", "100"], &with(&push, &["--cred", "alice.cred", "--rsl", "ok.rsl"])));
    assert_eq!(code(&stale), 1);

    // Someone else presenting alice's capability.
    let stolen = f.run(&with(&["check", "--explain"], &with(&push, &["--cred", "bob.cred", "--rsl", "ok.rsl"])));
    assert_eq!(code(&stolen), 1);
    assert!(stdout(&stolen).contains("capability: deny — subject-mismatch"));

    let text = fs::read_to_string(f.path("alice.cap")).unwrap();
    f.write("forged.cap", &text.replace("count range 1..512", "count range 1..9999"));
    let forged = f.run(&with(
        &["check", "--explain"],
        &["--resource-policy", "site.pol", "--cap", "forged.cap", "--keys", "keys", "--cred", "alice.cred", "--rsl", "ok.rsl"],
    ));
    assert_eq!(code(&forged), 1);
    assert!(stdout(&forged).contains("bad signature"));

    let both = f.run(&with(&["check"], &with(&PULL, &["--cap", "alice.cap", "--keys", "keys", "--cred", "alice.cred"])));
    assert_eq!(code(&both), 2);
}

#[test]
fn issue_cap_without_applicable_blocks_is_denied() {
    let f = Fixture::new();
    f.write("zed.cred", "subject: /O=Grid/CN=zed\nvo: fusion\nexpiry: 10\n");
    let o = f.run(&["issue-cap", "--vo-policy", "fusion.pol", "--cred", "zed.cred", "--keys", "keys", "--expiry", "5"]);
    assert_eq!(code(&o), 1);
    let wrong = f.run(&["issue-cap", "--vo-policy", "site.pol", "--cred", "alice.cred", "--keys", "keys", "--expiry", "5"]);
    assert_eq!(code(&wrong), 2);
}

#[test]
fn stateful_job_lifecycle() {
    let f = Fixture::new();
    let state = ["--state", "sim.state"];
    let submit = f.run(&with(
        &with(&["submit"], &state),
        &with(&PULL, &["--cred", "alice.cred", "--rsl", "ok.rsl", "--runtime", "20", "--gridmap", "gridmap", "--pool", "d1,d2"]),
    ));
    assert_eq!(code(&submit), 0, "{}", stderr(&submit));
    assert_eq!(stdout(&submit), "job=job-1 state=pending reserved=200\n");

    let ledger = f.run(&with(&["ledger"], &state));
    assert_eq!(stdout(&ledger), "vo=fusion used=200/1000\nmember=/O=Grid/CN=alice used=200/600\n");

    // Engine flags only apply to a new state file.
    let again = f.run(&with(
        &with(&["submit"], &state),
        &with(&PULL, &["--cred", "alice.cred", "--rsl", "ok.rsl", "--pool", "d3"]),
    ));
    assert_eq!(code(&again), 2);

    let tick = f.run(&with(&["tick", "--dt", "4"], &state));
    assert_eq!(
        stdout(&tick),
        "t=0 job=job-1 event=activated detail=priority=0\nclock=4\n"
    );

    let manage = |cred: &str, action: &str, job: &str| {
        f.run(&with(&with(&["manage"], &state), &with(&PULL, &["--cred", cred, "--job", job, "--action", action])))
    };
    let suspend = manage("carol.cred", "suspend", "job-1");
    assert_eq!(code(&suspend), 0, "{}", stderr(&suspend));
    assert_eq!(stdout(&suspend), "job=job-1 state=suspended\n");
    let illegal = manage("carol.cred", "suspend", "job-1");
    assert_eq!(code(&illegal), 1);
    assert!(stderr(&illegal).contains("illegal transition"));
    let denied = manage("bob.cred", "cancel", "job-1");
    assert_eq!(code(&denied), 1);
    let unknown = manage("alice.cred", "status", "job-7");
    assert_eq!(code(&unknown), 2);
    let start = manage("alice.cred", "start", "job-1");
    assert_eq!(code(&start), 2);
    let resume = manage("alice.cred", "resume", "job-1");
    assert_eq!(stdout(&resume), "job=job-1 state=active\n");

    let tick = f.run(&with(&["tick", "--dt", "100"], &state));
    assert_eq!(stdout(&tick), "t=10 job=job-1 event=done detail=consumed=20\nclock=104\n");
    let ledger = f.run(&with(&["ledger"], &state));
    assert_eq!(stdout(&ledger), "vo=fusion used=20/1000\nmember=/O=Grid/CN=alice used=20/600\n");

    let bad_dt = f.run(&with(&["tick", "--dt", "0"], &state));
    assert_eq!(code(&bad_dt), 2);
}

#[test]
fn submit_denials() {
    let f = Fixture::new();
    let state = ["--state", "sim.state"];
    let denied = f.run(&with(
        &with(&["submit", "--explain"], &state),
        &with(&PULL, &["--cred", "alice.cred", "--rsl", "bad-exe.rsl", "--gridmap", "gridmap"]),
    ));
    assert_eq!(code(&denied), 1);
    assert!(stdout(&denied).starts_with("decision: deny\n"));
    assert!(stderr(&denied).contains("denied: vo/block[0]: deny"));
    // A refused first submission leaves no state behind.
    assert!(!f.path("sim.state").exists());

    let no_account = f.run(&with(&with(&["submit"], &state), &with(&PULL, &["--cred", "bob.cred", "--rsl", "ok.rsl"])));
    assert_eq!(code(&no_account), 1);
    assert!(stderr(&no_account).contains("no local account"));

    let malformed = f.run(&with(&with(&["submit"], &state), &with(&PULL, &["--cred", "alice.cred", "--rsl", "malformed.rsl"])));
    assert_eq!(code(&malformed), 2);
}

#[test]
fn state_file_errors() {
    let f = Fixture::new();
    let missing = f.run(&["ledger", "--state", "absent.state"]);
    assert_eq!(code(&missing), 3);
    assert!(stderr(&missing).contains("does not exist"));

    f.write("junk.state", "not json");
    assert_eq!(code(&f.run(&["tick", "--dt", "1", "--state", "junk.state"])), 3);

    f.write("future.state", r#"{"format": "gridauth-state", "version": 99, "engine": {}}"#);
    let future = f.run(&["ledger", "--state", "future.state"]);
    assert_eq!(code(&future), 3);
    assert!(stderr(&future).contains("version 99"));

    let manage = f.run(&with(
        &["manage", "--state", "junk.state"],
        &with(&PULL, &["--cred", "alice.cred", "--job", "job-1", "--action", "status"]),
    ));
    assert_eq!(code(&manage), 3);
}

#[test]
fn output_is_deterministic() {
    let run_once = || {
        let f = Fixture::new();
        let state = ["--state", "sim.state"];
        let mut transcript = String::new();
        for args in [
            with(&with(&["submit"], &state), &with(&PULL, &["--cred", "alice.cred", "--rsl", "ok.rsl", "--gridmap", "gridmap"])),
            with(&["tick", "--dt", "50"], &state),
            with(&["ledger"], &state),
        ] {
            transcript += &stdout(&f.run(&args));
        }
        (transcript, fs::read(f.path("sim.state")).unwrap())
    };
    assert_eq!(run_once(), run_once());
}

fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

#[test]
fn bundled_scenarios_pass() {
    let f = Fixture::new();
    for name in ["scenario1.scn", "scenario2.scn", "scenario3.scn"] {
        let path = scenario_dir().join(name);
        let o = f.run(&["scenario", path.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{name}:\n{}{}", stdout(&o), stderr(&o));
        assert!(!stdout(&o).contains("FAIL "));
    }
}

#[test]
fn scenario_failures_and_errors() {
    let f = Fixture::new();
    f.write("empty.scn", "");
    let empty = f.run(&["scenario", "empty.scn"]);
    assert_eq!((code(&empty), stdout(&empty).as_str()), (0, ""));

    f.write("fail.scn", "tick 2\nexpect clock 3\n");
    let fail = f.run(&["scenario", "fail.scn"]);
    assert_eq!(code(&fail), 1);
    assert!(stdout(&fail).starts_with("FAIL step 2 (line 2): expect clock 3"));

    f.write("broken.scn", "tick 1\nsubmit s cred=nobody resource=site rsl='&(count=1)'\n");
    let broken = f.run(&["scenario", "broken.scn"]);
    assert_eq!(code(&broken), 2);
    assert!(stderr(&broken).contains("step 2 (line 2)"), "{}", stderr(&broken));

    // Scripts may load files relative to their own directory.
    f.write(
        "files.scn",
        "load-policy site site.pol\nload-policy fusion fusion.pol\nload-cred alice alice.cred\n\
         check c cred=alice resource=site vo=fusion rsl='&(executable=\"/opt/vo/apps/transp\")(maxcputime=5)'\n\
         expect c outcome permit\n",
    );
    let files = f.run(&["scenario", f.path("files.scn").to_str().unwrap()]);
    assert_eq!(code(&files), 0, "{}{}", stdout(&files), stderr(&files));
}
