use std::ffi::OsStr;
use std::io::Read;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::{BackendDescriptor, BackendError};

const STDERR_LIMIT: usize = 4096;

/// Run the backend with `args`, enforcing its timeout. Standard error is
/// captured for the failure report; standard output is discarded.
pub fn run_backend<I, S>(desc: &BackendDescriptor, args: I) -> Result<(), BackendError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    let exe = desc.resolve()?;
    let mut child = Command::new(&exe)
        .args(args)
        .envs(&desc.env)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|_| BackendError::MissingExecutable { name: desc.name.clone(), path: exe.clone() })?;
    let mut pipe = child.stderr.take().expect("stderr is piped");
    let reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = pipe.read_to_end(&mut buf);
        buf
    });
    let started = Instant::now();
    let status = loop {
        if let Some(status) = child.try_wait().map_err(|e| BackendError::io(&exe, e))? {
            break status;
        }
        if started.elapsed() > desc.timeout() {
            let _ = child.kill();
            let _ = child.wait();
            return Err(BackendError::Timeout { name: desc.name.clone(), secs: desc.timeout_secs });
        }
        thread::sleep(Duration::from_millis(2));
    };
    let stderr = reader.join().unwrap_or_default();
    if status.success() {
        return Ok(());
    }
    let mut text = String::from_utf8_lossy(&stderr).trim().to_string();
    if text.len() > STDERR_LIMIT {
        let cut = (0..=STDERR_LIMIT).rev().find(|&i| text.is_char_boundary(i)).unwrap_or(0);
        text.truncate(cut);
    }
    Err(BackendError::Crashed { name: desc.name.clone(), code: status.code(), stderr: text })
}
