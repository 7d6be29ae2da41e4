//! Request/response transports between tasks.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufReader, BufWriter, ErrorKind};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use super::wire::{read_frame, write_frame, Message};
use super::worker::WorkerService;
use crate::error::{Error, Result};

/// Sends one message to a task and waits for its reply. An `Error` reply
/// comes back as `Err`.
pub trait Transport: Send + Sync {
    fn call(&self, task: &str, msg: Message, timeout: Duration) -> Result<Message>;
}

fn reply(task: &str, m: Message) -> Result<Message> {
    match m {
        Message::Error { code, message } => Err(Message::into_error(code, format!("{task}: {message}"))),
        other => Ok(other),
    }
}

/// Calls workers living in this process directly, without serialization.
#[derive(Default)]
pub struct InprocTransport {
    workers: RwLock<HashMap<String, Weak<WorkerService>>>,
    down: RwLock<HashSet<String>>,
}

impl InprocTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, task: &str, w: &Arc<WorkerService>) {
        self.workers.write().unwrap().insert(task.to_string(), Arc::downgrade(w));
    }

    /// Makes every call to `task` fail as if its host were unreachable.
    pub fn set_down(&self, task: &str, down: bool) {
        let mut d = self.down.write().unwrap();
        if down {
            d.insert(task.to_string());
        } else {
            d.remove(task);
        }
    }
}

impl Transport for InprocTransport {
    fn call(&self, task: &str, msg: Message, _timeout: Duration) -> Result<Message> {
        if self.down.read().unwrap().contains(task) {
            return Err(Error::Unavailable(format!("{task} is down")));
        }
        let w = self
            .workers
            .read()
            .unwrap()
            .get(task)
            .and_then(Weak::upgrade)
            .ok_or_else(|| Error::Unavailable(format!("no in-process task {task}")))?;
        reply(task, w.handle(msg))
    }
}

/// Length-prefixed frames over TCP with a small connection pool per task.
pub struct TcpTransport {
    addrs: BTreeMap<String, String>,
    pool: Mutex<HashMap<String, Vec<TcpStream>>>,
    pub connect_timeout: Duration,
}

impl TcpTransport {
    /// `addrs` maps task names to `host:port`.
    pub fn new(addrs: BTreeMap<String, String>) -> Self {
        TcpTransport {
            addrs,
            pool: Mutex::new(HashMap::new()),
            connect_timeout: Duration::from_secs(5),
        }
    }

    fn connect(&self, task: &str) -> Result<TcpStream> {
        if let Some(s) = self.pool.lock().unwrap().get_mut(task).and_then(Vec::pop) {
            return Ok(s);
        }
        let addr = self
            .addrs
            .get(task)
            .ok_or_else(|| Error::Unavailable(format!("unknown task {task}")))?;
        let unavailable = |e: std::io::Error| Error::Unavailable(format!("{task} at {addr}: {e}"));
        let mut last = None;
        for a in addr.to_socket_addrs().map_err(unavailable)? {
            match TcpStream::connect_timeout(&a, self.connect_timeout) {
                Ok(s) => {
                    s.set_nodelay(true).map_err(unavailable)?;
                    return Ok(s);
                }
                Err(e) => last = Some(e),
            }
        }
        Err(unavailable(last.unwrap_or_else(|| ErrorKind::NotFound.into())))
    }
}

impl Transport for TcpTransport {
    fn call(&self, task: &str, msg: Message, timeout: Duration) -> Result<Message> {
        let stream = self.connect(task)?;
        let io_err = |e: Error| match e {
            Error::Io(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                Error::Timeout(format!("no reply from {task} within {timeout:?}"))
            }
            Error::Io(e) => Error::Unavailable(format!("{task}: {e}")),
            other => other,
        };
        stream.set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        write_frame(&mut BufWriter::new(&stream), &msg).map_err(io_err)?;
        let resp = match read_frame(&mut &stream).map_err(io_err)? {
            Some(m) => m,
            None => return Err(Error::Unavailable(format!("{task} closed the connection"))),
        };
        self.pool.lock().unwrap().entry(task.to_string()).or_default().push(stream);
        reply(task, resp)
    }
}

/// A running TCP front end for one worker.
pub struct Server {
    addr: std::net::SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    /// Serves `worker` on an already bound listener, one thread per
    /// connection.
    pub fn start(listener: TcpListener, worker: Arc<WorkerService>) -> Result<Server> {
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
        let (s, c) = (stop.clone(), conns.clone());
        let accept = std::thread::Builder::new()
            .name(format!("serve-{addr}"))
            .spawn(move || {
                for stream in listener.incoming() {
                    if s.load(Ordering::Acquire) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let _ = stream.set_nodelay(true);
                    if let Ok(clone) = stream.try_clone() {
                        c.lock().unwrap().push(clone);
                    }
                    let w = worker.clone();
                    std::thread::spawn(move || serve_connection(stream, &w));
                }
            })?;
        Ok(Server {
            addr,
            stop,
            conns,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> std::net::SocketAddr {
        self.addr
    }

    /// Stops accepting and drops every open connection.
    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::AcqRel) {
            return;
        }
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        for c in self.conns.lock().unwrap().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(stream: TcpStream, worker: &WorkerService) {
    let mut reader = BufReader::new(&stream);
    loop {
        match read_frame(&mut reader) {
            Ok(None) => return,
            Ok(Some(msg)) => {
                let resp = worker.handle(msg);
                if write_frame(&mut BufWriter::new(&stream), &resp).is_err() {
                    return;
                }
            }
            Err(e) => {
                let _ = write_frame(&mut BufWriter::new(&stream), &Message::from_error(&e));
                let _ = stream.shutdown(Shutdown::Both);
                return;
            }
        }
    }
}
