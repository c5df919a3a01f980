//! Model backend that forwards patches to a child process over stdin/stdout.

use std::io::{BufReader, BufWriter};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::tiler::protocol::{read_response, write_request};
use crate::tiler::{ModelBackend, Patch};

struct Session {
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    stdout: BufReader<ChildStdout>,
}

/// External model reached through the framed protocol in [`super::protocol`].
///
/// The child is started once and kept alive for the backend's lifetime; calls
/// are serialized through a mutex.
pub struct ExecModel {
    session: Mutex<Session>,
    channels_in: usize,
    classes_out: usize,
    command: String,
}

impl ExecModel {
    /// Spawns `program args...` with piped stdio.
    pub fn spawn(program: &str, args: &[String], channels_in: usize, classes_out: usize) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Model(format!("failed to start `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(ExecModel {
            session: Mutex::new(Session {
                child,
                stdin: Some(BufWriter::new(stdin)),
                stdout: BufReader::new(stdout),
            }),
            channels_in,
            classes_out,
            command: std::iter::once(program.to_string()).chain(args.iter().cloned()).collect::<Vec<_>>().join(" "),
        })
    }

    /// Splits a shell-like command line on whitespace and spawns it.
    pub fn from_command_line(cmd: &str, channels_in: usize, classes_out: usize) -> Result<Self> {
        let mut parts = cmd.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| Error::invalid("empty model command"))?;
        let args: Vec<String> = parts.collect();
        Self::spawn(&program, &args, channels_in, classes_out)
    }

    pub fn command(&self) -> &str {
        &self.command
    }
}

impl ModelBackend for ExecModel {
    fn channels_in(&self) -> usize {
        self.channels_in
    }

    fn classes_out(&self) -> usize {
        self.classes_out
    }

    fn predict(&self, patch: &Patch) -> Result<Patch> {
        let mut session = self
            .session
            .lock()
            .map_err(|_| Error::Model("model session poisoned".into()))?;
        let Session { stdin, stdout, .. } = &mut *session;
        let stdin = stdin
            .as_mut()
            .ok_or_else(|| Error::Model("model stdin already closed".into()))?;
        write_request(stdin, patch)?;
        read_response(stdout)
    }

    fn concurrent(&self) -> bool {
        false
    }
}

impl Drop for ExecModel {
    fn drop(&mut self) {
        if let Ok(session) = self.session.get_mut() {
            // Closing stdin tells the child the session is over.
            session.stdin.take();
            let _ = session.child.wait();
        }
    }
}
