use std::sync::Arc;
use std::time::{Duration, Instant};

use miniflow::graph::{Endpoint, GraphBuilder, GraphDef, NodeDef};
use miniflow::runtime::wire::{read_frame, write_frame};
use miniflow::runtime::{
    start_loopback_workers, Cluster, ClusterConfig, ClusterOptions, Message, MsgType, Session,
};
use miniflow::{DType, Error, Shape, Tensor};

/// a on task 0, b = a * 3 on task 1, c = b + x on task 0 (x fed).
fn cross_task_graph() -> (GraphDef, Endpoint) {
    let mut g = GraphBuilder::new();
    let (a, b) = g.with_device("/task:0", |g| {
        let a = g.constant(Tensor::vector(vec![1.0f64, 2.0, 3.0]));
        (a.clone(), a)
    });
    let b = g.with_device("/task:1", |g| {
        let three = g.scalar_f64(3.0);
        let _ = &b;
        g.mul(&a, &three)
    });
    let c = g.with_device("/task:0", |g| {
        let x = g.placeholder("x", DType::F64, Shape::new(vec![3]));
        g.add_(&b, &x)
    });
    (g.finish().unwrap(), c)
}

/// The same graph without device constraints, for a one-task cluster.
fn unplaced(g: &GraphDef) -> GraphDef {
    let mut g = g.clone();
    for n in &mut g.nodes {
        n.device.clear();
    }
    g
}

fn feeds() -> Vec<(Endpoint, Tensor)> {
    vec![(Endpoint::new("x", 0), Tensor::vector(vec![10.0f64, 20.0, 30.0]))]
}

fn quiet() -> ClusterOptions {
    ClusterOptions {
        heartbeat_interval: None,
        ..Default::default()
    }
}

#[test]
fn one_task_session_runs_a_constant() {
    let s = Session::new(Cluster::inproc(1).unwrap(), {
        let mut g = GraphBuilder::new();
        g.name_next("seven");
        g.scalar_f64(7.0);
        g.finish().unwrap()
    })
    .unwrap();
    let out = s.run(&[], &[Endpoint::new("seven", 0)]).unwrap();
    assert_eq!(out[0].to_f64_vec().unwrap(), vec![7.0]);
}

#[test]
fn invalid_graph_is_rejected_at_session_creation() {
    let mut g = GraphDef::new();
    g.nodes.push(NodeDef::new("n", "Neg").input("missing:0"));
    assert!(matches!(Session::new(Cluster::inproc(1).unwrap(), g), Err(Error::Validation(_))));
}

#[test]
fn cross_task_equals_single_task() {
    let (g, c) = cross_task_graph();
    let one = Session::new(Cluster::inproc(1).unwrap(), unplaced(&g)).unwrap();
    let two = Session::new(Cluster::inproc(2).unwrap(), g).unwrap();
    let a = one.run(&feeds(), &[c.clone()]).unwrap();
    let b = two.run(&feeds(), &[c.clone()]).unwrap();
    assert!(a[0].bit_eq(&b[0]));
    assert_eq!(b[0].to_f64_vec().unwrap(), vec![13.0, 26.0, 39.0]);
}

#[test]
fn second_run_is_one_message_per_task() {
    let (g, c) = cross_task_graph();
    let cluster = Cluster::connect(ClusterConfig::inproc(2), quiet()).unwrap();
    let s = Session::new(cluster.clone(), g).unwrap();
    s.run(&feeds(), &[c.clone()]).unwrap();
    assert_eq!(cluster.counters().total(MsgType::RegisterSubgraph), 2);
    cluster.counters().reset();
    s.run(&feeds(), &[c.clone()]).unwrap();
    let counts = cluster.counters();
    assert_eq!(counts.total(MsgType::RegisterSubgraph), 0);
    for t in cluster.tasks() {
        assert_eq!(counts.get(&t, MsgType::RunPartition), 1, "{t}");
    }
    assert_eq!(counts.snapshot().values().sum::<u64>(), 2);
    // a different signature is a new registration
    s.run(&feeds(), &[c, Endpoint::new("x", 0)]).unwrap();
    assert_eq!(counts.total(MsgType::RegisterSubgraph), 2);
    assert_eq!(s.cached_plans(), 2);
}

#[test]
fn feed_order_does_not_change_the_signature() {
    let mut g = GraphBuilder::new();
    let x = g.placeholder("x", DType::F64, Shape::scalar());
    let y = g.placeholder("y", DType::F64, Shape::scalar());
    let s = g.sub(&x, &y);
    let cluster = Cluster::connect(ClusterConfig::inproc(1), quiet()).unwrap();
    let sess = Session::new(cluster.clone(), g.finish().unwrap()).unwrap();
    let fx = (x, Tensor::scalar(5.0f64));
    let fy = (y, Tensor::scalar(2.0f64));
    let a = sess.run(&[fx.clone(), fy.clone()], &[s.clone()]).unwrap();
    let b = sess.run(&[fy, fx], &[s]).unwrap();
    assert_eq!(a[0].to_f64_vec().unwrap(), vec![3.0]);
    assert!(a[0].bit_eq(&b[0]));
    assert_eq!(cluster.counters().total(MsgType::RegisterSubgraph), 1);
}

#[test]
fn tcp_cluster_matches_inproc() {
    let (cfg, _servers) = start_loopback_workers(&[("worker", 3)]).unwrap();
    let (mut g, c) = cross_task_graph();
    g.nodes.push(
        NodeDef::new("far", "Neg").input(c.clone()).device("/task:2"),
    );
    let fetches = [c, Endpoint::new("far", 0)];
    let tcp = Session::new(Cluster::connect(cfg, quiet()).unwrap(), g.clone()).unwrap();
    let local = Session::new(Cluster::inproc(1).unwrap(), unplaced(&g)).unwrap();
    for _ in 0..3 {
        let a = tcp.run(&feeds(), &fetches).unwrap();
        let b = local.run(&feeds(), &fetches).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.bit_eq(y));
        }
    }
}

#[test]
fn variables_live_on_their_task_across_steps() {
    let mut g = GraphBuilder::new();
    let v = g.with_device("/task:1", |g| g.variable("v", DType::F64, Shape::scalar()));
    let one = g.scalar_f64(1.0);
    let inc = g.assign_add(&v, &one);
    let s = Session::new(Cluster::inproc(2).unwrap(), g.finish().unwrap()).unwrap();
    for i in 1..=5 {
        let out = s.run(&[], &[inc.clone()]).unwrap();
        assert_eq!(out[0].to_f64_vec().unwrap(), vec![i as f64]);
    }
}

#[test]
fn concurrent_steps_do_not_interfere() {
    // step A blocks dequeuing until step B enqueues, on the same task
    let mut g = GraphBuilder::new();
    let q = g.fifo_queue("q", 4, &[DType::F64], &[Shape::scalar()]);
    let deq = g.dequeue(&q, 1);
    let x = g.placeholder("x", DType::F64, Shape::scalar());
    let enq = g.enqueue(&q, &[x.clone()]);
    let s = Arc::new(Session::new(Cluster::inproc(1).unwrap(), g.finish().unwrap()).unwrap());
    let s2 = s.clone();
    let deq0 = deq[0].clone();
    let waiter = std::thread::spawn(move || s2.run(&[], &[deq0]));
    std::thread::sleep(Duration::from_millis(50));
    s.run_targets(&[(x, Tensor::scalar(4.5f64))], &[], &[enq]).unwrap();
    let out = waiter.join().unwrap().unwrap();
    assert_eq!(out[0].to_f64_vec().unwrap(), vec![4.5]);
}

fn slow_cross_task_graph() -> (GraphDef, Endpoint) {
    let mut g = GraphBuilder::new();
    let slow = g.with_device("/task:1", |g| {
        let a = g.scalar_f64(1.0);
        g.delay(&a, 2_000)
    });
    let out = g.with_device("/task:0", |g| g.neg(&slow));
    (g.finish().unwrap(), out)
}

#[test]
fn killed_task_fails_the_step_without_hanging() {
    let (g, out) = slow_cross_task_graph();
    let cluster = Cluster::connect(ClusterConfig::inproc(2), quiet()).unwrap();
    let s = Session::new(cluster.clone(), g).unwrap();
    let c2 = cluster.clone();
    let killer = std::thread::spawn(move || {
        std::thread::sleep(Duration::from_millis(100));
        c2.kill_task("/job:worker/task:1").unwrap();
    });
    let start = Instant::now();
    let r = s.run(&[], &[out.clone()]);
    killer.join().unwrap();
    assert!(matches!(r.as_ref().map_err(Error::root), Err(Error::Unavailable(_))), "{r:?}");
    assert!(start.elapsed() < Duration::from_secs(5));
    // task 0 dropped the aborted step
    std::thread::sleep(Duration::from_millis(100));
    assert_eq!(cluster.worker("/job:worker/task:0").unwrap().active_steps(), 0);

    // once the task is back the session re-registers and works again
    cluster.restart_task("/job:worker/task:1").unwrap();
    assert_eq!(s.run(&[], &[out]).unwrap()[0].to_f64_vec().unwrap(), vec![-1.0]);
}

#[test]
fn missed_heartbeats_mark_a_task_down() {
    let opts = ClusterOptions {
        heartbeat_interval: Some(Duration::from_millis(20)),
        dead_after: Duration::from_millis(150),
        ..Default::default()
    };
    let cluster = Cluster::connect(ClusterConfig::inproc(2), opts).unwrap();
    let (g, out) = slow_cross_task_graph();
    let s = Session::new(cluster.clone(), g).unwrap();
    assert!(!cluster.is_down("/job:worker/task:1"));
    cluster.kill_task("/job:worker/task:1").unwrap();
    std::thread::sleep(Duration::from_millis(400));
    assert!(cluster.is_down("/job:worker/task:1"));
    assert!(!cluster.is_down("/job:worker/task:0"));
    let start = Instant::now();
    assert!(s.run(&[], &[out]).is_err());
    assert!(start.elapsed() < Duration::from_secs(1));
}

#[test]
fn hung_tcp_task_is_detected_by_heartbeat() {
    let (cfg, mut servers) = start_loopback_workers(&[("worker", 2)]).unwrap();
    let opts = ClusterOptions {
        heartbeat_interval: Some(Duration::from_millis(20)),
        dead_after: Duration::from_millis(200),
        ..Default::default()
    };
    let cluster = Cluster::connect(cfg, opts).unwrap();
    let (g, out) = slow_cross_task_graph();
    let s = Session::new(cluster, g).unwrap();
    let killer = std::thread::spawn(move || {
        std::thread::sleep(Duration::from_millis(100));
        servers[1].shutdown();
        servers
    });
    let start = Instant::now();
    assert!(s.run(&[], &[out]).is_err());
    assert!(start.elapsed() < Duration::from_secs(5), "{:?}", start.elapsed());
    drop(killer.join().unwrap());
}

#[test]
fn worker_answers_raw_frames_and_rejects_garbage() {
    let (cfg, _servers) = start_loopback_workers(&[("worker", 1)]).unwrap();
    let addr = cfg.address("worker", 0).unwrap().to_string();
    let mut conn = std::net::TcpStream::connect(&addr).unwrap();
    write_frame(&mut conn, &Message::Heartbeat { seq: 42 }).unwrap();
    assert_eq!(read_frame(&mut conn).unwrap(), Some(Message::Heartbeat { seq: 42 }));

    use std::io::Write;
    conn.write_all(b"NOPE\x07\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
    match read_frame(&mut conn).unwrap() {
        Some(Message::Error { code, .. }) => assert_eq!(code, 10),
        other => panic!("expected an error reply, got {other:?}"),
    }
    assert_eq!(read_frame(&mut conn).unwrap(), None, "connection should be closed");
}

#[test]
fn register_and_run_a_null_graph_over_raw_frames() {
    let (cfg, _servers) = start_loopback_workers(&[("worker", 1)]).unwrap();
    let mut conn = std::net::TcpStream::connect(cfg.address("worker", 0).unwrap()).unwrap();
    let mut g = GraphDef::new();
    g.nodes.push(NodeDef::new("n", "NoOp").device("/job:worker/task:0/cpu:0"));
    let call = |conn: &mut std::net::TcpStream, m: Message| {
        write_frame(conn, &m).unwrap();
        read_frame(conn).unwrap().unwrap()
    };
    call(&mut conn, Message::CreateSession { session: "s".into() });
    call(
        &mut conn,
        Message::RegisterSubgraph {
            session: "s".into(),
            handle: "h".into(),
            partitions: vec![miniflow::runtime::wire::PartitionDef {
                device: "/job:worker/task:0/cpu:0".into(),
                graph_json: miniflow::graph::json::to_json(&g),
            }],
            fetches: vec![],
        },
    );
    let r = call(
        &mut conn,
        Message::RunPartition {
            session: "s".into(),
            handle: "h".into(),
            step_id: 9,
            feeds: vec![],
        },
    );
    assert_eq!(r, Message::StepDone { step_id: 9, outputs: vec![] });
    let r = call(
        &mut conn,
        Message::RunPartition {
            session: "s".into(),
            handle: "other".into(),
            step_id: 10,
            feeds: vec![],
        },
    );
    assert!(matches!(r, Message::Error { code: 8, .. }));
}

#[test]
fn abort_before_run_cancels_the_step() {
    let cluster = Cluster::connect(ClusterConfig::inproc(1), quiet()).unwrap();
    let w = cluster.worker("/job:worker/task:0").unwrap();
    let mut g = GraphDef::new();
    g.nodes.push(NodeDef::new("n", "NoOp").device("/job:worker/task:0/cpu:0"));
    w.handle(Message::RegisterSubgraph {
        session: "s".into(),
        handle: "h".into(),
        partitions: vec![miniflow::runtime::wire::PartitionDef {
            device: "/job:worker/task:0/cpu:0".into(),
            graph_json: miniflow::graph::json::to_json(&g),
        }],
        fetches: vec![],
    });
    w.handle(Message::AbortStep { step_id: 3, reason: "test".into() });
    let r = w.handle(Message::RunPartition {
        session: "s".into(),
        handle: "h".into(),
        step_id: 3,
        feeds: vec![],
    });
    assert!(matches!(r, Message::Error { code: 1, .. }), "{r:?}");
}

#[test]
fn many_cross_task_edges_in_one_step() {
    let mut g = GraphBuilder::new();
    let srcs: Vec<Endpoint> = g.with_device("/task:0", |g| (0..300).map(|i| g.scalar_f64(i as f64)).collect());
    let negs: Vec<Endpoint> = g.with_device("/task:1", |g| srcs.iter().map(|s| g.neg(s)).collect());
    let total = g.with_device("/task:0", |g| g.addn(&negs));
    let (cfg, _servers) = start_loopback_workers(&[("worker", 2)]).unwrap();
    let s = Session::new(Cluster::connect(cfg, quiet()).unwrap(), g.finish().unwrap()).unwrap();
    let out = s.run(&[], &[total]).unwrap();
    assert_eq!(out[0].to_f64_vec().unwrap(), vec![-(299.0 * 300.0 / 2.0)]);
}
