//! Child-process execution with a scrubbed environment and a wall-clock
//! timeout. Output streams go to files so a chatty child never blocks on a
//! full pipe.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{IoContext, Result};

pub(crate) struct Invocation<'a> {
    pub command: &'a [String],
    pub workdir: &'a Path,
    pub env: BTreeMap<String, String>,
    pub timeout: Duration,
    pub stdout_path: &'a Path,
    pub stderr_path: &'a Path,
}

#[derive(Debug)]
pub(crate) struct Outcome {
    /// `None` when the child was killed by a signal.
    pub exit_code: Option<i32>,
    pub timed_out: bool,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
}

impl Outcome {
    pub fn success(&self) -> bool {
        !self.timed_out && self.exit_code == Some(0)
    }

    pub fn describe(&self) -> String {
        if self.timed_out {
            "timed out".to_owned()
        } else {
            match self.exit_code {
                Some(c) => format!("exit status {c}"),
                None => "killed by signal".to_owned(),
            }
        }
    }
}

/// Environment every step sees: a fixed locale and time zone, `HOME` set to
/// the working directory, the caller's `PATH`, and one
/// `CERTPRO_CONFIG_<KEY>` variable per configuration entry.
pub(crate) fn step_environment(workdir: &Path, config: &BTreeMap<String, String>) -> BTreeMap<String, String> {
    let mut env = BTreeMap::new();
    env.insert(
        "PATH".to_owned(),
        std::env::var("PATH").unwrap_or_else(|_| "/usr/local/bin:/usr/bin:/bin".to_owned()),
    );
    env.insert("HOME".to_owned(), workdir.display().to_string());
    env.insert("LANG".to_owned(), "C".to_owned());
    env.insert("LC_ALL".to_owned(), "C".to_owned());
    env.insert("TZ".to_owned(), "UTC".to_owned());
    for (k, v) in config {
        env.insert(config_var(k), v.clone());
    }
    env
}

pub fn config_var(key: &str) -> String {
    let suffix: String = key
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("CERTPRO_CONFIG_{suffix}")
}

/// Runs the command. `Err` means it could not be launched at all.
pub(crate) fn run(inv: Invocation<'_>) -> Result<Outcome> {
    let (program, args) = inv.command.split_first().expect("non-empty command");
    let stdout = File::create(inv.stdout_path).at(inv.stdout_path)?;
    let stderr = File::create(inv.stderr_path).at(inv.stderr_path)?;
    let mut child = Command::new(program)
        .args(args)
        .current_dir(inv.workdir)
        .env_clear()
        .envs(&inv.env)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .process_group(0)
        .spawn()
        .at(program)?;

    let deadline = Instant::now() + inv.timeout;
    let mut pause = Duration::from_millis(2);
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait().at(program)? {
            break status;
        }
        if Instant::now() >= deadline {
            timed_out = true;
            // SAFETY: plain syscall on the child's own process group.
            unsafe {
                libc::kill(-(child.id() as i32), libc::SIGKILL);
            }
            break child.wait().at(program)?;
        }
        thread::sleep(pause);
        pause = (pause * 2).min(Duration::from_millis(50));
    };
    if !timed_out {
        // Reap stragglers that outlived the leader.
        unsafe {
            libc::kill(-(child.id() as i32), libc::SIGKILL);
        }
    }

    Ok(Outcome {
        exit_code: status.code(),
        timed_out,
        stdout: fs::read(inv.stdout_path).at(inv.stdout_path)?,
        stderr: fs::read(inv.stderr_path).at(inv.stderr_path)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(script: &str, timeout: Duration) -> Result<Outcome> {
        let dir = tempfile::tempdir().unwrap();
        let work = dir.path().join("w");
        fs::create_dir(&work).unwrap();
        let cmd = vec!["sh".to_owned(), "-c".to_owned(), script.to_owned()];
        run(Invocation {
            command: &cmd,
            workdir: &work,
            env: step_environment(&work, &[("alpha-mode".to_string(), "x".to_string())].into()),
            timeout,
            stdout_path: &dir.path().join("out"),
            stderr_path: &dir.path().join("err"),
        })
    }

    #[test]
    fn captures_streams_and_status() {
        let o = sh("echo hi; echo oops >&2; exit 3", Duration::from_secs(10)).unwrap();
        assert_eq!(o.exit_code, Some(3));
        assert_eq!(o.stdout, b"hi\n");
        assert_eq!(o.stderr, b"oops\n");
        assert!(!o.success());
    }

    #[test]
    fn config_reaches_child() {
        let o = sh("printf %s \"$CERTPRO_CONFIG_ALPHA_MODE\"", Duration::from_secs(10)).unwrap();
        assert_eq!(o.stdout, b"x");
    }

    #[test]
    fn timeout_kills_group() {
        let start = Instant::now();
        let o = sh("sleep 30 & sleep 30", Duration::from_millis(300)).unwrap();
        assert!(o.timed_out);
        assert!(start.elapsed() < Duration::from_secs(10));
    }

    #[test]
    fn launch_failure_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let cmd = vec!["/definitely/not/here".to_owned()];
        let r = run(Invocation {
            command: &cmd,
            workdir: dir.path(),
            env: BTreeMap::new(),
            timeout: Duration::from_secs(1),
            stdout_path: &dir.path().join("out"),
            stderr_path: &dir.path().join("err"),
        });
        assert!(r.is_err());
    }
}
