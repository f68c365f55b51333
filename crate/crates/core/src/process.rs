//! Subprocess execution with a hard deadline.
//!
//! Children are placed in their own process group so a timeout kills the
//! whole tree, not just the immediate child (a shell wrapper would otherwise
//! leave its grandchildren holding the output pipes open).

use std::io::{Read, Write};
use std::os::unix::process::CommandExt;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use wait_timeout::ChildExt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExitKind {
    Exited(i32),
    /// Terminated by a signal we did not send.
    Signaled,
    TimedOut,
}

#[derive(Debug, Clone)]
pub struct ProcessOutput {
    pub exit: ExitKind,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub elapsed: Duration,
}

impl ProcessOutput {
    pub fn success(&self) -> bool {
        self.exit == ExitKind::Exited(0)
    }
}

/// Runs `cmd` to completion or until `timeout` elapses, feeding `stdin` and
/// collecting both output streams.
pub fn run_with_timeout(
    mut cmd: Command,
    stdin: &[u8],
    timeout: Duration,
) -> std::io::Result<ProcessOutput> {
    cmd.stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    let start = Instant::now();
    let mut child = cmd.spawn()?;

    let mut child_in = child.stdin.take();
    let input = stdin.to_vec();
    let writer = thread::spawn(move || {
        if let Some(pipe) = child_in.as_mut() {
            // The child may exit without reading; a broken pipe is fine.
            let _ = pipe.write_all(&input);
        }
    });
    let stdout_reader = spawn_reader(child.stdout.take());
    let stderr_reader = spawn_reader(child.stderr.take());

    let exit = match child.wait_timeout(timeout)? {
        Some(status) => match status.code() {
            Some(code) => ExitKind::Exited(code),
            None => ExitKind::Signaled,
        },
        None => {
            kill_group(child.id());
            let _ = child.kill();
            child.wait()?;
            ExitKind::TimedOut
        }
    };
    let elapsed = start.elapsed();
    let _ = writer.join();
    let stdout = stdout_reader.join().unwrap_or_default();
    let stderr = stderr_reader.join().unwrap_or_default();
    Ok(ProcessOutput {
        exit,
        stdout,
        stderr,
        elapsed,
    })
}

fn spawn_reader<R: Read + Send + 'static>(pipe: Option<R>) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut p) = pipe {
            let _ = p.read_to_end(&mut buf);
        }
        buf
    })
}

fn kill_group(pid: u32) {
    // SAFETY: kill(2) with a negative pid signals the process group we created
    // via process_group(0); it has no memory-safety preconditions.
    unsafe {
        libc::kill(-(pid as libc::pid_t), libc::SIGKILL);
    }
}
