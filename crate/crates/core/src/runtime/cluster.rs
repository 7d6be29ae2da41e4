//! Static cluster description.

use std::collections::BTreeMap;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::placement::DeviceSpec;

/// Address entry marking a task hosted inside the client process.
pub const INPROC: &str = "inproc";

/// Job name → ordered task addresses. Task `i` of job `j` is
/// `/job:j/task:i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterConfig {
    pub jobs: BTreeMap<String, Vec<String>>,
}

impl ClusterConfig {
    /// `n` in-process tasks of job `worker`.
    pub fn inproc(n: usize) -> ClusterConfig {
        let mut jobs = BTreeMap::new();
        jobs.insert("worker".to_string(), vec![INPROC.to_string(); n]);
        ClusterConfig { jobs }
    }

    /// Accepts `{"jobs":{"ps":["host:port",..],"worker":[..]}}` or
    /// `{"inproc":N}`.
    pub fn from_json(s: &str) -> Result<ClusterConfig> {
        let v: Value = serde_json::from_str(s).map_err(|e| Error::invalid(format!("cluster config: {e}")))?;
        let bad = |m: &str| Error::invalid(format!("cluster config: {m}"));
        let obj = v.as_object().ok_or_else(|| bad("expected an object"))?;
        let cfg = if let Some(n) = obj.get("inproc") {
            let n = n.as_u64().ok_or_else(|| bad("\"inproc\" must be a non-negative integer"))?;
            ClusterConfig::inproc(n as usize)
        } else {
            let jobs = obj
                .get("jobs")
                .and_then(Value::as_object)
                .ok_or_else(|| bad("missing \"jobs\" object"))?;
            let mut out = BTreeMap::new();
            for (job, tasks) in jobs {
                let tasks = tasks
                    .as_array()
                    .ok_or_else(|| bad(&format!("job '{job}' must list task addresses")))?;
                let addrs = tasks
                    .iter()
                    .map(|t| t.as_str().map(str::to_string))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| bad(&format!("job '{job}' has a non-string address")))?;
                out.insert(job.clone(), addrs);
            }
            ClusterConfig { jobs: out }
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "jobs": self.jobs }).to_string()
    }

    fn check(&self) -> Result<()> {
        if self.num_tasks() == 0 {
            return Err(Error::invalid("cluster config has no tasks"));
        }
        for job in self.jobs.keys() {
            if job.is_empty() || job.contains(['/', ':']) {
                return Err(Error::invalid(format!("invalid job name '{job}'")));
            }
        }
        let inproc = self.jobs.values().flatten().filter(|a| *a == INPROC).count();
        if inproc != 0 && inproc != self.num_tasks() {
            return Err(Error::invalid("cluster config mixes in-process and TCP tasks"));
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.jobs.values().map(Vec::len).sum()
    }

    pub fn is_inproc(&self) -> bool {
        self.jobs.values().flatten().all(|a| a == INPROC)
    }

    /// Task names in job order, then index order.
    pub fn tasks(&self) -> Vec<String> {
        self.jobs
            .iter()
            .flat_map(|(j, ts)| (0..ts.len()).map(move |i| task_name(j, i)))
            .collect()
    }

    /// One CPU device per task.
    pub fn devices(&self) -> Vec<DeviceSpec> {
        self.jobs
            .iter()
            .flat_map(|(j, ts)| (0..ts.len()).map(move |i| DeviceSpec::new(j.clone(), i as u32, 0)))
            .collect()
    }

    pub fn address(&self, job: &str, index: usize) -> Option<&str> {
        self.jobs.get(job).and_then(|t| t.get(index)).map(String::as_str)
    }

    /// Task name → address, for every task.
    pub fn addresses(&self) -> BTreeMap<String, String> {
        self.jobs
            .iter()
            .flat_map(|(j, ts)| ts.iter().enumerate().map(move |(i, a)| (task_name(j, i), a.clone())))
            .collect()
    }
}

pub fn task_name(job: &str, index: usize) -> String {
    format!("/job:{job}/task:{index}")
}

/// Parses a `job:index` task identity, as carried by `MINIFLOW_TASK`.
pub fn parse_task_id(s: &str) -> Result<(String, usize)> {
    let (job, idx) = s
        .split_once(':')
        .ok_or_else(|| Error::invalid(format!("task id '{s}' must look like job:index")))?;
    let idx = idx
        .parse()
        .map_err(|_| Error::invalid(format!("task id '{s}' has a bad index")))?;
    if job.is_empty() {
        return Err(Error::invalid(format!("task id '{s}' has an empty job")));
    }
    Ok((job.to_string(), idx))
}
