use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use gridauth_core::pdp::AuthzQuery;
use gridauth_core::{
    decide, parse_policy, parse_rsl, AuthzMode, DynamicAccountPool, EngineConfig, GridCredential, GridMapFile,
    JobManager, PolicySourceSet, SimProfile,
};

const SITE: &str = r#"policy "site" source resource {
    trust vo "fusion";
    subject any { allow action start, status, suspend, resume, cancel; }
}"#;

const FUSION: &str = r#"policy "fusion" source vo {
    allocation 100000000 cpu-seconds;
    subject group "analysts" {
        allow action start;
        attr executable in {"/opt/vo/apps/transp", "/opt/vo/apps/efit*"};
        require attr executable;
        attr count range 1..512;
        attr maxcputime max 3600;
        attr queue in {"short", "long"};
    }
    subject group "developers" {
        allow action start;
        attr executable in {"/home/*"};
    }
    subject identity "/O=Grid/CN=carol" { allow action suspend, cancel on jobtag "fusion-prod"; }
}"#;

const RSL: &str = r#"&(executable="/opt/vo/apps/transp")(count=16)(maxcputime=600)(queue="short")(jobtag="fusion-prod")(arguments="-n" "100")"#;

fn alice() -> GridCredential {
    GridCredential::new("/O=Grid/CN=alice", Some("fusion"), ["analysts"], u64::MAX).unwrap()
}

fn parsing(c: &mut Criterion) {
    c.bench_function("parse_rsl", |b| b.iter(|| parse_rsl(black_box(RSL)).unwrap()));
    c.bench_function("parse_policy", |b| b.iter(|| parse_policy(black_box(FUSION)).unwrap()));
}

fn deciding(c: &mut Criterion) {
    let site = parse_policy(SITE).unwrap();
    let vo = parse_policy(FUSION).unwrap();
    let sources = PolicySourceSet::new(&site, Some(&vo));
    let query = AuthzQuery::start(alice(), "gatekeeper", parse_rsl(RSL).unwrap());
    c.bench_function("decide_pull", |b| b.iter(|| decide(black_box(&query), &sources).unwrap()));
}

fn simulating(c: &mut Criterion) {
    let site = parse_policy(SITE).unwrap();
    let vo = parse_policy(FUSION).unwrap();
    let mode = AuthzMode::Pull(PolicySourceSet::new(&site, Some(&vo)));
    let cred = alice();
    let mut gridmap = GridMapFile::new();
    gridmap.insert("/O=Grid/CN=alice", "alice").unwrap();
    let mut loaded = JobManager::new(EngineConfig::default(), gridmap, DynamicAccountPool::new(Vec::<String>::new()).unwrap());
    let profile = SimProfile { runtime: 5_000, memory_peak: 0, disk: 0 };
    for _ in 0..200 {
        loaded.gatekeeper_submit(&cred, RSL, &mode, profile).unwrap();
    }
    c.bench_function("tick_200_jobs_x100", |b| {
        b.iter_batched(|| loaded.clone(), |mut e| e.tick(black_box(100)), BatchSize::SmallInput)
    });
}

criterion_group!(benches, parsing, deciding, simulating);
criterion_main!(benches);
