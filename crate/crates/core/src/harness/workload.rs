//! Workloads executed inside a tracked phase.
//!
//! Synthetic workloads stand in for model training/inference: repeated
//! blocked matrix-multiply rounds whose count scales with the model's
//! parameter count and the `work_scale` knob. External workloads are
//! arbitrary shell command lines run as child processes.

use std::fs::File;
use std::hint::black_box;
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::budget::StopSignal;
use super::catalog::ModelCatalogEntry;
use super::Phase;

/// Training rounds per inference round (forward + backward analog).
pub const TRAINING_ROUND_FACTOR: u64 = 3;
pub const ROUND_DIM: usize = 64;
const BLOCK: usize = 16;

pub fn phase_factor(phase: Phase) -> u64 {
    match phase {
        Phase::Training => TRAINING_ROUND_FACTOR,
        Phase::Inference => 1,
    }
}

/// Round count for one synthetic phase; a pure function of its inputs.
pub fn synthetic_rounds(entry: &ModelCatalogEntry, phase: Phase, work_scale: f64) -> u64 {
    let base = (entry.parameters_millions * work_scale).round().max(1.0) as u64;
    base * phase_factor(phase)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticRun {
    pub rounds_planned: u64,
    pub rounds_completed: u64,
    pub checksum: f64,
    pub cancelled: bool,
}

struct Kernel {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

impl Kernel {
    fn new() -> Self {
        let n = ROUND_DIM;
        // fixed pseudo-random fill keeps every run identical
        let mut state = 0x9e37_79b9_7f4a_7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let a = (0..n * n).map(|_| next()).collect();
        let b = (0..n * n).map(|_| next()).collect();
        Self {
            a,
            b,
            c: vec![0.0; n * n],
        }
    }

    fn round(&mut self) {
        let n = ROUND_DIM;
        self.c.iter_mut().for_each(|x| *x = 0.0);
        for ii in (0..n).step_by(BLOCK) {
            for kk in (0..n).step_by(BLOCK) {
                for jj in (0..n).step_by(BLOCK) {
                    for i in ii..ii + BLOCK {
                        for k in kk..kk + BLOCK {
                            let aik = self.a[i * n + k];
                            let row = &mut self.c[i * n + jj..i * n + jj + BLOCK];
                            let brow = &self.b[k * n + jj..k * n + jj + BLOCK];
                            for (c, b) in row.iter_mut().zip(brow) {
                                *c += aik * b;
                            }
                        }
                    }
                }
            }
        }
        let scale = self.c.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
        for (a, c) in self.a.iter_mut().zip(&self.c) {
            *a = c / scale;
        }
        black_box(&self.a);
    }

    fn checksum(&self) -> f64 {
        self.a.iter().sum()
    }
}

/// Execute `rounds` kernel rounds, checking `stop` between rounds.
pub fn run_synthetic_rounds(rounds: u64, stop: Option<&StopSignal>) -> SyntheticRun {
    let mut kernel = Kernel::new();
    let mut done = 0;
    let mut cancelled = false;
    while done < rounds {
        if stop.is_some_and(StopSignal::is_raised) {
            cancelled = true;
            break;
        }
        kernel.round();
        done += 1;
    }
    SyntheticRun {
        rounds_planned: rounds,
        rounds_completed: done,
        checksum: kernel.checksum(),
        cancelled,
    }
}

pub fn synthetic_workload(entry: &ModelCatalogEntry, phase: Phase, work_scale: f64) -> SyntheticRun {
    run_synthetic_rounds(synthetic_rounds(entry, phase, work_scale), None)
}

/// Work scale making `phase` of `entry` run for about `target_s` on this
/// machine, rounded up to three significant digits.
pub fn calibrate_work_scale(entry: &ModelCatalogEntry, phase: Phase, target_s: f64) -> f64 {
    let mut kernel = Kernel::new();
    let start = Instant::now();
    let mut rounds = 0u64;
    while rounds < 3 || start.elapsed() < Duration::from_millis(200) {
        kernel.round();
        rounds += 1;
    }
    let per_round = start.elapsed().as_secs_f64() / rounds as f64;
    let base_rounds = target_s / per_round / phase_factor(phase) as f64;
    let scale = base_rounds / entry.parameters_millions;
    let magnitude = 10f64.powf(scale.log10().floor() - 2.0);
    (scale / magnitude).ceil() * magnitude
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExternalCommand {
    pub command: String,
    pub workdir: Option<PathBuf>,
    pub env: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExternalRun {
    pub status: ExitStatus,
    /// The stop signal was observed and the child was told to terminate.
    pub terminated: bool,
    /// The child outlived the grace period and was killed.
    pub forced_kill: bool,
    /// Monotonic time the child exited.
    pub exited_at: f64,
}

fn output_file(path: Option<&Path>) -> io::Result<Stdio> {
    Ok(match path {
        Some(p) => Stdio::from(File::create(p)?),
        None => Stdio::null(),
    })
}

#[cfg(unix)]
fn signal_group(pid: u32, signal: libc::c_int) {
    // the child leads its own process group
    unsafe {
        libc::kill(-(pid as libc::pid_t), signal);
    }
}

#[cfg(not(unix))]
fn signal_group(_pid: u32, _signal: i32) {}

/// Run `cmd` through `sh -c`. When `stop` is raised the process group gets
/// SIGTERM, then SIGKILL once `grace` has elapsed.
pub fn run_external(
    cmd: &ExternalCommand,
    stdout: Option<&Path>,
    stderr: Option<&Path>,
    stop: Option<&StopSignal>,
    grace: Duration,
) -> io::Result<ExternalRun> {
    let mut command = Command::new("sh");
    command
        .arg("-c")
        .arg(&cmd.command)
        .stdin(Stdio::null())
        .stdout(output_file(stdout)?)
        .stderr(output_file(stderr)?)
        .envs(cmd.env.iter().map(|(k, v)| (k, v)));
    if let Some(dir) = &cmd.workdir {
        command.current_dir(dir);
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        command.process_group(0);
    }
    let mut child = command.spawn()?;
    let pid = child.id();

    let mut terminated = false;
    let mut forced_kill = false;
    let mut term_sent: Option<Instant> = None;
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(ExternalRun {
                status,
                terminated,
                forced_kill,
                exited_at: crate::clock::monotonic_now(),
            });
        }
        if term_sent.is_none() && stop.is_some_and(StopSignal::is_raised) {
            #[cfg(unix)]
            signal_group(pid, libc::SIGTERM);
            #[cfg(not(unix))]
            child.kill()?;
            terminated = true;
            term_sent = Some(Instant::now());
        }
        if let Some(sent) = term_sent {
            if !forced_kill && sent.elapsed() >= grace {
                #[cfg(unix)]
                signal_group(pid, libc::SIGKILL);
                let _ = child.kill();
                forced_kill = true;
            }
        }
        thread::sleep(Duration::from_millis(5));
    }
}
