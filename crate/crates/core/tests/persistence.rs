use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use miniflow::graph::{Endpoint, GraphBuilder, GraphDef};
use miniflow::persistence::{
    build_saver, checkpoint_path, list_checkpoints, load, parse_step, CheckpointPolicy, Saver,
};
use miniflow::runtime::{Cluster, ClusterConfig, ClusterOptions, Session};
use miniflow::{DType, Shape, Tensor};

fn session(n: usize, g: GraphDef) -> Session {
    let opts = ClusterOptions {
        heartbeat_interval: None,
        ..Default::default()
    };
    Session::new(Cluster::connect(ClusterConfig::inproc(n), opts).unwrap(), g).unwrap()
}

/// Two variables on two tasks, trained by SGD towards fixed targets.
struct Model {
    session: Session,
    saver: Saver,
    init: String,
    step: String,
    values: Vec<Endpoint>,
}

fn model(tasks: usize) -> Model {
    let mut b = GraphBuilder::new();
    let dev = |i: usize| format!("/task:{}", i % tasks);
    let a = b.with_device(&dev(0), |b| b.variable("a", DType::F64, Shape::new(vec![3])));
    let c = b.with_device(&dev(1), |b| b.variable("c", DType::F64, Shape::new(vec![2, 2])));
    let a0 = b.constant(Tensor::vector(vec![0.5f64, -1.0, 2.0]));
    let c0 = b.constant(Tensor::new([2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap());
    let ia = b.assign(&a, &a0).node;
    let ic = b.assign(&c, &c0).node;
    let init = b.noop(&[ia, ic]);
    let ra = b.read(&a);
    let rc = b.read(&c);
    let ta = b.constant(Tensor::vector(vec![1.0f64, 1.0, 1.0]));
    let tc = b.constant(Tensor::new([2, 2], vec![0.0f64, 1.0, 0.0, 1.0]).unwrap());
    let ga = b.sub(&ra, &ta);
    let gc = b.sub(&rc, &tc);
    let ua = b.apply_gradient_descent(&a, &ga, 0.1).node;
    let uc = b.apply_gradient_descent(&c, &gc, 0.1).node;
    let step = b.noop(&[ua, uc]);
    let values = vec![b.read(&a), b.read(&c)];
    let saver = build_saver(&mut b, &[a, c]).unwrap();
    Model {
        session: session(tasks, b.finish().unwrap()),
        saver,
        init,
        step,
        values,
    }
}

impl Model {
    fn run(&self, target: &str) {
        self.session.run_targets(&[], &[], &[target.to_string()]).unwrap();
    }

    fn values(&self) -> Vec<Vec<u64>> {
        self.session
            .run(&[], &self.values)
            .unwrap()
            .iter()
            .map(|t| t.to_vec::<f64>().unwrap().iter().map(|v| v.to_bits()).collect())
            .collect()
    }
}

/// Host replay of the same updates: x ← x + (−0.1)(x − t).
fn oracle(steps: usize) -> Vec<Vec<u64>> {
    let mut a = vec![0.5f64, -1.0, 2.0];
    let mut c = vec![1.0f64, 2.0, 3.0, 4.0];
    let ta = [1.0, 1.0, 1.0];
    let tc = [0.0, 1.0, 0.0, 1.0];
    for _ in 0..steps {
        for (x, t) in a.iter_mut().zip(ta) {
            *x = *x + (-0.1) * (*x - t);
        }
        for (x, t) in c.iter_mut().zip(tc) {
            *x = *x + (-0.1) * (*x - t);
        }
    }
    [a, c].iter().map(|v| v.iter().map(|x| x.to_bits()).collect()).collect()
}

fn steps_on_disk(dir: &Path) -> Vec<u64> {
    list_checkpoints(dir).unwrap().into_iter().map(|(s, _)| s).collect()
}

#[test]
fn file_names_encode_the_step() {
    assert_eq!(parse_step("ckpt-40.mfck"), Some(40));
    assert_eq!(parse_step("ckpt-.mfck"), None);
    assert_eq!(parse_step("ckpt-4a.mfck"), None);
    assert_eq!(parse_step("ckpt-40.mfck.part1"), None);
    assert_eq!(parse_step("other-40.mfck"), None);
    let p = checkpoint_path(Path::new("/x"), 7);
    assert_eq!(p, Path::new("/x/ckpt-7.mfck"));
}

#[test]
fn keep_last_retains_the_newest() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(1);
    m.run(&m.init);
    let mut policy = CheckpointPolicy::new(dir.path(), 1, 2).unwrap();
    for step in 1..=5 {
        m.run(&m.step);
        policy.after_step(&m.session, &m.saver, step).unwrap();
    }
    assert_eq!(steps_on_disk(dir.path()), vec![4, 5]);
}

#[test]
fn every_k_skips_steps_between() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(1);
    m.run(&m.init);
    let mut policy = CheckpointPolicy::new(dir.path(), 3, 10).unwrap();
    for step in 1..=10 {
        m.run(&m.step);
        policy.after_step(&m.session, &m.saver, step).unwrap();
    }
    assert_eq!(steps_on_disk(dir.path()), vec![3, 6, 9]);
    assert!(CheckpointPolicy::new(dir.path(), 0, 1).is_err());
    assert!(CheckpointPolicy::new(dir.path(), 1, 0).is_err());
}

#[test]
fn highest_score_survives_pruning() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(1);
    m.run(&m.init);
    // step 2 scores best
    let scores = [0.0, 0.1, 0.9, 0.3, 0.2, 0.4];
    let mut policy = CheckpointPolicy::new(dir.path(), 1, 2)
        .unwrap()
        .with_score(move |s| Ok(scores[s as usize]));
    for step in 1..=5 {
        m.run(&m.step);
        policy.after_step(&m.session, &m.saver, step).unwrap();
    }
    // 2 (0.9) and 5 (0.4) are the best two
    assert_eq!(steps_on_disk(dir.path()), vec![2, 5]);
}

#[test]
fn one_file_per_device_group() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(2);
    m.run(&m.init);
    let base = checkpoint_path(dir.path(), 1);
    m.saver.save(&m.session, &base).unwrap();
    let files = m.saver.files(&base);
    assert_eq!(files.len(), 2);
    let names: Vec<Vec<String>> = files
        .iter()
        .map(|f| load(f).unwrap().into_iter().map(|(n, _)| n).collect())
        .collect();
    assert_eq!(names, vec![vec!["a".to_string()], vec!["c".to_string()]]);
}

#[test]
fn crash_recovery_resumes_from_the_latest_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    {
        let m = model(2);
        m.run(&m.init);
        let mut policy = CheckpointPolicy::new(dir.path(), 10, 5).unwrap();
        for step in 1..=45u64 {
            m.run(&m.step);
            policy.after_step(&m.session, &m.saver, step).unwrap();
        }
        // the cluster goes away mid-run
    }
    let m = model(2);
    let policy = CheckpointPolicy::new(dir.path(), 10, 5).unwrap();
    assert_eq!(policy.restore_latest(&m.session, &m.saver).unwrap(), Some(40));
    assert_eq!(m.values(), oracle(40));

    // damage the newest checkpoint: recovery falls back one
    let newest = checkpoint_path(dir.path(), 40);
    let mut bytes = std::fs::read(&newest).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&newest, bytes).unwrap();
    let m = model(2);
    assert_eq!(policy.restore_latest(&m.session, &m.saver).unwrap(), Some(30));
    assert_eq!(m.values(), oracle(30));

    // training continues from there to the same place
    for _ in 30..40 {
        m.run(&m.step);
    }
    assert_eq!(m.values(), oracle(40));
}

#[test]
fn missing_part_file_makes_a_checkpoint_unreadable() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(2);
    m.run(&m.init);
    let mut policy = CheckpointPolicy::new(dir.path(), 1, 5).unwrap();
    policy.after_step(&m.session, &m.saver, 1).unwrap();
    m.run(&m.step);
    policy.after_step(&m.session, &m.saver, 2).unwrap();
    std::fs::remove_file(m.saver.files(&checkpoint_path(dir.path(), 2))[1].clone()).unwrap();
    let fresh = model(2);
    assert_eq!(policy.restore_latest(&fresh.session, &fresh.saver).unwrap(), Some(1));
    assert_eq!(fresh.values(), oracle(0));
}

#[test]
fn empty_directory_restores_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(1);
    let policy = CheckpointPolicy::new(dir.path().join("fresh"), 1, 1).unwrap();
    assert_eq!(policy.restore_latest(&m.session, &m.saver).unwrap(), None);
}

#[test]
fn partial_restore_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(1);
    m.run(&m.init);
    let base = checkpoint_path(dir.path(), 0);
    m.saver.save(&m.session, &base).unwrap();
    for _ in 0..3 {
        m.run(&m.step);
    }
    m.saver.restore_subset(&m.session, &base, &["c"]).unwrap();
    let v = m.values();
    assert_eq!(v[0], oracle(3)[0]);
    assert_eq!(v[1], oracle(0)[1]);
    assert!(m.saver.restore_subset(&m.session, &base, &["zz"]).is_err());
}

#[test]
fn saves_during_training_never_tear_a_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let mut b = GraphBuilder::new();
    let v = b.variable("counter", DType::F64, Shape::new(vec![256]));
    let zero = b.constant(Tensor::zeros(DType::F64, [256]));
    let init = b.assign(&v, &zero).node;
    let one = b.constant(Tensor::vector(vec![1.0f64; 256]));
    let bump = b.assign_add(&v, &one).node;
    let saver = build_saver(&mut b, &[v]).unwrap();
    let s = Arc::new(session(1, b.finish().unwrap()));
    s.run_targets(&[], &[], &[init]).unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let trainer = {
        let (s, stop) = (s.clone(), stop.clone());
        std::thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                s.run_targets(&[], &[], std::slice::from_ref(&bump)).unwrap();
            }
        })
    };
    for i in 0..50 {
        let p = checkpoint_path(dir.path(), i);
        saver.save(&s, &p).unwrap();
        let t = load(&p).unwrap().remove(0).1.to_vec::<f64>().unwrap();
        assert!(t.iter().all(|&x| x == t[0]), "torn tensor in save {i}");
    }
    stop.store(true, Ordering::Relaxed);
    trainer.join().unwrap();
}
