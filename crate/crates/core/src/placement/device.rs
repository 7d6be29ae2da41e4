use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A concrete device: `/job:J/task:T/cpu:I`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DeviceSpec {
    pub job: String,
    pub task: u32,
    pub index: u32,
}

impl DeviceSpec {
    pub fn new(job: impl Into<String>, task: u32, index: u32) -> Self {
        DeviceSpec {
            job: job.into(),
            task,
            index,
        }
    }

    pub fn canonical(&self) -> String {
        self.to_string()
    }

    /// The device string with `:` replaced, usable inside node names.
    pub fn tag(&self) -> String {
        format!("{}.{}.{}", self.job, self.task, self.index)
    }

    /// `/job:J/task:T`, the task hosting this device.
    pub fn task_name(&self) -> String {
        format!("/job:{}/task:{}", self.job, self.task)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let p = DevicePattern::parse(s)?;
        match p {
            DevicePattern {
                job: Some(job),
                task: Some(task),
                cpu,
            } => Ok(DeviceSpec {
                job,
                task,
                index: cpu.unwrap_or(0),
            }),
            _ => Err(Error::invalid(format!("device '{s}' must name a job and a task"))),
        }
    }
}

impl fmt::Display for DeviceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "/job:{}/task:{}/cpu:{}", self.job, self.task, self.index)
    }
}

impl FromStr for DeviceSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        DeviceSpec::parse(s)
    }
}

/// A partial device constraint. Any subset of `/job:<name>`, `/task:<int>`
/// and `/cpu:<int>`, in any order, optionally separated by whitespace.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct DevicePattern {
    pub job: Option<String>,
    pub task: Option<u32>,
    pub cpu: Option<u32>,
}

impl DevicePattern {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::invalid(format!("bad device pattern '{s}': {why}"));
        let mut p = DevicePattern::default();
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if compact.is_empty() {
            return Ok(p);
        }
        let Some(rest) = compact.strip_prefix('/') else {
            return Err(bad("must start with '/'"));
        };
        for seg in rest.split('/') {
            let (key, val) = seg.split_once(':').ok_or_else(|| bad("segment without ':'"))?;
            if val.is_empty() {
                return Err(bad("empty value"));
            }
            let num = || val.parse::<u32>().map_err(|_| bad("expected a non-negative integer"));
            match key {
                "job" if p.job.is_none() => {
                    if !val.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                        return Err(bad("job names use letters, digits, '_' and '-'"));
                    }
                    p.job = Some(val.to_string())
                }
                "task" if p.task.is_none() => p.task = Some(num()?),
                "cpu" if p.cpu.is_none() => p.cpu = Some(num()?),
                "job" | "task" | "cpu" => return Err(bad("repeated segment")),
                _ => return Err(bad("unknown segment")),
            }
        }
        Ok(p)
    }

    pub fn matches(&self, d: &DeviceSpec) -> bool {
        self.job.as_ref().is_none_or(|j| *j == d.job)
            && self.task.is_none_or(|t| t == d.task)
            && self.cpu.is_none_or(|c| c == d.index)
    }

    pub fn is_empty(&self) -> bool {
        self.job.is_none() && self.task.is_none() && self.cpu.is_none()
    }
}

impl fmt::Display for DevicePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(j) = &self.job {
            write!(f, "/job:{j}")?;
        }
        if let Some(t) = self.task {
            write!(f, "/task:{t}")?;
        }
        if let Some(c) = self.cpu {
            write!(f, "/cpu:{c}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn segments_in_any_order() {
        let a = DevicePattern::parse("/cpu:1/job:ps /task:3").unwrap();
        assert_eq!(a.job.as_deref(), Some("ps"));
        assert_eq!(a.task, Some(3));
        assert_eq!(a.cpu, Some(1));
        assert!(DevicePattern::parse("").unwrap().is_empty());
        assert!(DevicePattern::parse("/job:ps/job:w").is_err());
        assert!(DevicePattern::parse("/gpu:0").is_err());
        assert!(DevicePattern::parse("job:ps").is_err());
        assert!(DevicePattern::parse("/task:x").is_err());
    }

    #[test]
    fn partial_patterns_match() {
        let d = DeviceSpec::new("ps", 3, 0);
        assert!(DevicePattern::parse("/job:ps").unwrap().matches(&d));
        assert!(DevicePattern::parse("/task:3").unwrap().matches(&d));
        assert!(!DevicePattern::parse("/task:2").unwrap().matches(&d));
        assert!(!DevicePattern::parse("/job:worker/task:3").unwrap().matches(&d));
    }

    proptest! {
        #[test]
        fn canonical_round_trip(job in "[a-z][a-z0-9_]{0,6}", task in 0u32..1000, index in 0u32..8) {
            let d = DeviceSpec::new(job, task, index);
            prop_assert_eq!(DeviceSpec::parse(&d.canonical()).unwrap(), d.clone());
            prop_assert!(DevicePattern::parse(&d.canonical()).unwrap().matches(&d));
        }
    }
}
