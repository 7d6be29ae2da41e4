//! Periodic checkpoints driven from the client: Save and Restore ops wired
//! into the graph, file naming, retention and recovery.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::{Endpoint, GraphBuilder};
use crate::runtime::Session;
use crate::tensor::{DType, Shape, Tensor};

/// `ckpt-<step>.mfck` in `dir`.
pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step}.mfck"))
}

/// The step encoded in a `ckpt-<step>.mfck` file name.
pub fn parse_step(file_name: &str) -> Option<u64> {
    let digits = file_name.strip_prefix("ckpt-")?.strip_suffix(".mfck")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Checkpoints in `dir`, oldest first. A missing directory has none.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for e in entries {
        let e = e?;
        if let Some(step) = e.file_name().to_str().and_then(parse_step) {
            out.push((step, e.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Save and restore ops for a set of variables. Variables on one device
/// share one Save; the first group writes the checkpoint path itself and
/// group `i > 0` writes `<path>.part<i>`.
#[derive(Debug, Clone)]
pub struct Saver {
    /// One string placeholder per group, fed with that group's file.
    paths: Vec<Endpoint>,
    pub save: String,
    pub restore: String,
    /// Variable name → the Assign that restores it.
    restores: BTreeMap<String, String>,
}

pub fn build_saver(b: &mut GraphBuilder, vars: &[Endpoint]) -> Result<Saver> {
    let mut groups: BTreeMap<String, Vec<&Endpoint>> = BTreeMap::new();
    let mut seen = std::collections::HashSet::new();
    for v in vars {
        let node = b
            .graph()
            .node(&v.node)
            .filter(|n| n.op == "Variable")
            .ok_or_else(|| Error::invalid(format!("'{v}' is not a variable")))?;
        if !seen.insert(v.node.clone()) {
            return Err(Error::invalid(format!("variable '{}' listed twice", v.node)));
        }
        groups.entry(node.device.clone()).or_default().push(v);
    }
    let mut paths = Vec::new();
    let mut saves = Vec::new();
    let mut restores = BTreeMap::new();
    for (i, (device, members)) in groups.into_iter().enumerate() {
        let (path, save, assigns) = b.with_device(&device, |b| -> Result<_> {
            let path = b.placeholder(&format!("saver/path_{i}"), DType::String, Shape::scalar());
            let names: Vec<String> = members.iter().map(|v| v.node.clone()).collect();
            let names_t = b.constant(Tensor::vector(names.clone()));
            let mut inputs = vec![path.clone(), names_t];
            inputs.extend(members.iter().map(|v| b.read(v)));
            let save = b.op("Save", &inputs, vec![]);
            let mut assigns = Vec::new();
            for v in &members {
                let dtype = b.graph().node(&v.node).expect("checked").attr_dtype("dtype")?;
                let name = b.constant(Tensor::scalar(v.node.clone()));
                let value = Endpoint::new(b.op("Restore", &[path.clone(), name], vec![("dtype", dtype.into())]), 0);
                assigns.push((v.node.clone(), b.assign(v, &value).node));
            }
            Ok((path, save, assigns))
        })?;
        paths.push(path);
        saves.push(save);
        restores.extend(assigns);
    }
    let save = b.noop(&saves);
    let restore = b.noop(&restores.values().cloned().collect::<Vec<_>>());
    Ok(Saver {
        paths,
        save,
        restore,
        restores,
    })
}

impl Saver {
    /// Files making up the checkpoint at `base`.
    pub fn files(&self, base: &Path) -> Vec<PathBuf> {
        (0..self.paths.len())
            .map(|i| {
                if i == 0 {
                    base.to_path_buf()
                } else {
                    let mut s = base.as_os_str().to_owned();
                    s.push(format!(".part{i}"));
                    PathBuf::from(s)
                }
            })
            .collect()
    }

    fn feeds(&self, base: &Path) -> Vec<(Endpoint, Tensor)> {
        self.paths
            .iter()
            .zip(self.files(base))
            .map(|(p, f)| (p.clone(), Tensor::scalar(f.to_string_lossy().into_owned())))
            .collect()
    }

    pub fn save(&self, session: &Session, base: &Path) -> Result<()> {
        session.run_targets(&self.feeds(base), &[], std::slice::from_ref(&self.save))?;
        Ok(())
    }

    pub fn restore(&self, session: &Session, base: &Path) -> Result<()> {
        session.run_targets(&self.feeds(base), &[], std::slice::from_ref(&self.restore))?;
        Ok(())
    }

    /// Restores only the named variables.
    pub fn restore_subset(&self, session: &Session, base: &Path, names: &[&str]) -> Result<()> {
        let targets = names
            .iter()
            .map(|n| {
                self.restores
                    .get(*n)
                    .cloned()
                    .ok_or_else(|| Error::NotFound(format!("variable '{n}' is not saved")))
            })
            .collect::<Result<Vec<_>>>()?;
        session.run_targets(&self.feeds(base), &[], &targets)?;
        Ok(())
    }

    /// Whether every file of the checkpoint at `base` opens and verifies.
    pub fn is_readable(&self, base: &Path) -> bool {
        self.files(base).iter().all(|f| super::format::load(f).is_ok())
    }
}

type ScoreFn = Box<dyn FnMut(u64) -> Result<f64> + Send>;

/// Saves every `every_k` steps and keeps `keep_last` checkpoints: the
/// newest ones, or the best-scoring ones when a score function is set.
/// Scores survive restarts in `scores.json` next to the checkpoints.
pub struct CheckpointPolicy {
    dir: PathBuf,
    every_k: u64,
    keep_last: usize,
    score_fn: Option<ScoreFn>,
    scores: BTreeMap<u64, f64>,
}

impl CheckpointPolicy {
    pub fn new(dir: impl Into<PathBuf>, every_k: u64, keep_last: usize) -> Result<Self> {
        if every_k == 0 || keep_last == 0 {
            return Err(Error::invalid("checkpoint interval and retention must be at least 1"));
        }
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let scores = match fs::read(dir.join("scores.json")) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| Error::invalid(format!("scores.json: {e}")))?,
            Err(_) => BTreeMap::new(),
        };
        Ok(CheckpointPolicy {
            dir,
            every_k,
            keep_last,
            score_fn: None,
            scores,
        })
    }

    /// Ranks checkpoints by `f(step)`, higher is better.
    pub fn with_score(mut self, f: impl FnMut(u64) -> Result<f64> + Send + 'static) -> Self {
        self.score_fn = Some(Box::new(f));
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn should_save(&self, step: u64) -> bool {
        step > 0 && step % self.every_k == 0
    }

    /// Call after each completed step; saves when the step is due.
    pub fn after_step(&mut self, session: &Session, saver: &Saver, step: u64) -> Result<Option<PathBuf>> {
        if !self.should_save(step) {
            return Ok(None);
        }
        self.save(session, saver, step).map(Some)
    }

    pub fn save(&mut self, session: &Session, saver: &Saver, step: u64) -> Result<PathBuf> {
        let path = checkpoint_path(&self.dir, step);
        saver.save(session, &path)?;
        if let Some(f) = self.score_fn.as_mut() {
            let s = f(step)?;
            self.scores.insert(step, s);
        }
        self.prune(saver)?;
        Ok(path)
    }

    fn prune(&mut self, saver: &Saver) -> Result<()> {
        let all = list_checkpoints(&self.dir)?;
        let mut ranked: Vec<&(u64, PathBuf)> = all.iter().collect();
        if self.score_fn.is_some() {
            // best first; unscored last; newer wins ties
            let key = |step: u64| self.scores.get(&step).copied().unwrap_or(f64::NEG_INFINITY);
            ranked.sort_by(|a, b| key(b.0).total_cmp(&key(a.0)).then(b.0.cmp(&a.0)));
        } else {
            ranked.reverse();
        }
        for (step, path) in ranked.into_iter().skip(self.keep_last) {
            for f in saver.files(path) {
                match fs::remove_file(&f) {
                    Ok(()) => {}
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                    Err(e) => return Err(e.into()),
                }
            }
            self.scores.remove(step);
        }
        if self.score_fn.is_some() {
            let json = serde_json::to_vec(&self.scores).map_err(|e| Error::Internal(e.to_string()))?;
            fs::write(self.dir.join("scores.json"), json)?;
        }
        Ok(())
    }

    /// Restores the newest checkpoint whose files all verify, skipping
    /// unreadable ones. Returns its step, or `None` when nothing usable
    /// exists.
    pub fn restore_latest(&self, session: &Session, saver: &Saver) -> Result<Option<u64>> {
        for (step, path) in list_checkpoints(&self.dir)?.into_iter().rev() {
            if !saver.is_readable(&path) {
                log::warn!("skipping unreadable checkpoint {}", path.display());
                continue;
            }
            saver.restore(session, &path)?;
            return Ok(Some(step));
        }
        Ok(None)
    }
}
