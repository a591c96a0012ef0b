//! Simulated accelerator: mirrored host/device buffers, kernel binaries,
//! compute units and an append-only event log.
//!
//! Device memory is an ordinary heap allocation kept separate from the host
//! copy. Every copy between the two is recorded, so tests can assert exactly
//! when data moves and when the device is (re)programmed.

use std::fmt;
use std::io::Write;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("buffer `{0}` has never been written")]
    Uninitialized(String),
    #[error("kernel `{kernel}` is not in the loaded binary ({loaded})")]
    KernelNotLoaded { kernel: String, loaded: String },
    #[error("launch of `{0}` with an empty batch")]
    EmptyBatch(String),
    #[error("buffer `{label}` holds {size} values, got {got}")]
    SizeMismatch {
        label: String,
        size: usize,
        got: usize,
    },
    #[error("invalid binary `{0}`: {1}")]
    InvalidBinary(String, String),
}

/// Which copy of a [`SyncedBuffer`] is authoritative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SyncState {
    Uninitialized,
    HeadAtHost,
    HeadAtDevice,
    Synced,
}

impl fmt::Display for SyncState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyncState::Uninitialized => "UNINITIALIZED",
            SyncState::HeadAtHost => "HEAD_AT_HOST",
            SyncState::HeadAtDevice => "HEAD_AT_DEVICE",
            SyncState::Synced => "SYNCED",
        })
    }
}

/// Layer data (inputs/outputs) versus learned parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BufferRole {
    Activation,
    Parameter,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    HostToDevice {
        buffer: String,
        role: BufferRole,
        bytes: usize,
    },
    DeviceToHost {
        buffer: String,
        role: BufferRole,
        bytes: usize,
    },
    Program {
        binary: String,
        cost_ms: f64,
    },
    KernelLaunch {
        kernel: String,
        cu: usize,
        work_items: usize,
    },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::HostToDevice { .. } => "host_to_device",
            Event::DeviceToHost { .. } => "device_to_host",
            Event::Program { .. } => "program",
            Event::KernelLaunch { .. } => "kernel_launch",
        }
    }

    pub fn is_transfer(&self) -> bool {
        matches!(self, Event::HostToDevice { .. } | Event::DeviceToHost { .. })
    }

    pub fn is_activation_transfer(&self) -> bool {
        matches!(
            self,
            Event::HostToDevice { role: BufferRole::Activation, .. }
                | Event::DeviceToHost { role: BufferRole::Activation, .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub seq: u64,
    pub event: Event,
}

impl EventRecord {
    /// `seq,event_kind,detail,bytes_or_ms`
    pub fn to_line(&self) -> String {
        let (detail, amount) = match &self.event {
            Event::HostToDevice { buffer, bytes, .. } | Event::DeviceToHost { buffer, bytes, .. } => {
                (buffer.clone(), bytes.to_string())
            }
            Event::Program { binary, cost_ms } => (binary.clone(), format!("{cost_ms:.3}")),
            Event::KernelLaunch {
                kernel,
                cu,
                work_items,
            } => (format!("{kernel}@cu{cu}"), work_items.to_string()),
        };
        format!("{},{},{},{}", self.seq, self.event.kind(), detail, amount)
    }
}

#[derive(Default)]
struct LogInner {
    next_seq: u64,
    records: Vec<EventRecord>,
}

/// Shared, append-only, totally ordered event log.
#[derive(Clone, Default)]
pub struct EventLog(Arc<Mutex<LogInner>>);

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, LogInner> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn append(&self, event: Event) -> u64 {
        let mut inner = self.lock();
        let seq = inner.next_seq;
        inner.next_seq += 1;
        inner.records.push(EventRecord { seq, event });
        seq
    }

    pub fn len(&self) -> usize {
        self.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<EventRecord> {
        self.lock().records.clone()
    }

    /// Records appended at or after position `mark` (a previous [`len`](Self::len)).
    pub fn since(&self, mark: usize) -> Vec<EventRecord> {
        self.lock().records[mark..].to_vec()
    }

    pub fn events(&self) -> Vec<Event> {
        self.lock().records.iter().map(|r| r.event.clone()).collect()
    }

    pub fn write_lines(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "seq,event_kind,detail,bytes_or_ms")?;
        for r in self.lock().records.iter() {
            writeln!(w, "{}", r.to_line())?;
        }
        Ok(())
    }
}

/// Counts of each event kind in a slice of records.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EventCounts {
    pub host_to_device: usize,
    pub device_to_host: usize,
    pub activation_host_to_device: usize,
    pub activation_device_to_host: usize,
    pub programs: usize,
    pub launches: usize,
}

impl EventCounts {
    pub fn of(records: &[EventRecord]) -> Self {
        let mut c = Self::default();
        for r in records {
            match &r.event {
                Event::HostToDevice { role, .. } => {
                    c.host_to_device += 1;
                    if *role == BufferRole::Activation {
                        c.activation_host_to_device += 1;
                    }
                }
                Event::DeviceToHost { role, .. } => {
                    c.device_to_host += 1;
                    if *role == BufferRole::Activation {
                        c.activation_device_to_host += 1;
                    }
                }
                Event::Program { .. } => c.programs += 1,
                Event::KernelLaunch { .. } => c.launches += 1,
            }
        }
        c
    }
}

/// A host array mirrored in device memory, with lazy synchronisation.
pub struct SyncedBuffer {
    label: String,
    role: BufferRole,
    size: usize,
    host: Option<Vec<f32>>,
    device: Option<Vec<f32>>,
    state: SyncState,
    log: EventLog,
}

impl fmt::Debug for SyncedBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SyncedBuffer")
            .field("label", &self.label)
            .field("role", &self.role)
            .field("size", &self.size)
            .field("state", &self.state)
            .finish()
    }
}

impl SyncedBuffer {
    pub fn new(label: impl Into<String>, role: BufferRole, size: usize, log: &EventLog) -> Self {
        Self {
            label: label.into(),
            role,
            size,
            host: None,
            device: None,
            state: SyncState::Uninitialized,
            log: log.clone(),
        }
    }

    /// A buffer whose authoritative copy is `data` on the host.
    pub fn from_host(label: impl Into<String>, role: BufferRole, data: Vec<f32>, log: &EventLog) -> Self {
        let mut b = Self::new(label, role, data.len(), log);
        b.host = Some(data);
        b.state = SyncState::HeadAtHost;
        b
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn role(&self) -> BufferRole {
        self.role
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn state(&self) -> SyncState {
        self.state
    }

    fn bytes(&self) -> usize {
        self.size * std::mem::size_of::<f32>()
    }

    fn to_host(&mut self) {
        let src = self.device.as_ref().expect("device copy present");
        match &mut self.host {
            Some(h) => h.copy_from_slice(src),
            None => self.host = Some(src.clone()),
        }
        self.log.append(Event::DeviceToHost {
            buffer: self.label.clone(),
            role: self.role,
            bytes: self.bytes(),
        });
    }

    fn to_device(&mut self) {
        let src = self.host.as_ref().expect("host copy present");
        match &mut self.device {
            Some(d) => d.copy_from_slice(src),
            None => self.device = Some(src.clone()),
        }
        self.log.append(Event::HostToDevice {
            buffer: self.label.clone(),
            role: self.role,
            bytes: self.bytes(),
        });
    }

    /// Read access on the host; pulls from the device if it holds the head.
    pub fn host_data(&mut self) -> Result<&[f32], DeviceError> {
        match self.state {
            SyncState::Uninitialized => return Err(DeviceError::Uninitialized(self.label.clone())),
            SyncState::HeadAtDevice => {
                self.to_host();
                self.state = SyncState::Synced;
            }
            SyncState::HeadAtHost | SyncState::Synced => {}
        }
        Ok(self.host.as_deref().expect("host copy present"))
    }

    /// Write access on the host; afterwards the host holds the head.
    pub fn mutable_host_data(&mut self) -> &mut [f32] {
        match self.state {
            SyncState::Uninitialized => self.host = Some(vec![0.0; self.size]),
            SyncState::HeadAtDevice => self.to_host(),
            SyncState::HeadAtHost | SyncState::Synced => {}
        }
        self.state = SyncState::HeadAtHost;
        self.host.as_deref_mut().expect("host copy present")
    }

    /// Read access on the device; pushes from the host if it holds the head.
    pub fn device_data(&mut self) -> Result<&[f32], DeviceError> {
        match self.state {
            SyncState::Uninitialized => return Err(DeviceError::Uninitialized(self.label.clone())),
            SyncState::HeadAtHost => {
                self.to_device();
                self.state = SyncState::Synced;
            }
            SyncState::HeadAtDevice | SyncState::Synced => {}
        }
        Ok(self.device.as_deref().expect("device copy present"))
    }

    /// Write access on the device; afterwards the device holds the head.
    pub fn mutable_device_data(&mut self) -> &mut [f32] {
        match self.state {
            SyncState::Uninitialized => self.device = Some(vec![0.0; self.size]),
            SyncState::HeadAtHost => self.to_device(),
            SyncState::HeadAtDevice | SyncState::Synced => {}
        }
        self.state = SyncState::HeadAtDevice;
        self.device.as_deref_mut().expect("device copy present")
    }

    /// Replace the host contents, e.g. with a new network input.
    pub fn set_host_data(&mut self, data: &[f32]) -> Result<(), DeviceError> {
        if data.len() != self.size {
            return Err(DeviceError::SizeMismatch {
                label: self.label.clone(),
                size: self.size,
                got: data.len(),
            });
        }
        match self.state {
            // Overwritten wholesale, so no need to pull the device copy first.
            SyncState::HeadAtDevice => {
                self.host = Some(data.to_vec());
                self.state = SyncState::HeadAtHost;
            }
            _ => self.mutable_host_data().copy_from_slice(data),
        }
        Ok(())
    }

    /// Both copies, for checking the synchronisation invariant.
    pub fn raw_copies(&self) -> (Option<&[f32]>, Option<&[f32]>) {
        (self.host.as_deref(), self.device.as_deref())
    }
}

/// An offline-compiled device binary.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBinary {
    pub id: String,
    pub kernels: Vec<String>,
    pub program_cost_ms: f64,
}

impl KernelBinary {
    pub fn new(id: impl Into<String>, kernels: Vec<String>, program_cost_ms: f64) -> Result<Self, DeviceError> {
        let id = id.into();
        if kernels.is_empty() {
            return Err(DeviceError::InvalidBinary(id, "no kernels".into()));
        }
        if !(program_cost_ms.is_finite() && program_cost_ms >= 0.0) {
            return Err(DeviceError::InvalidBinary(id, format!("programming cost {program_cost_ms}")));
        }
        Ok(Self {
            id,
            kernels,
            program_cost_ms,
        })
    }

    /// A binary whose programming latency is drawn from `range_ms`, seeded by
    /// the binary id so repeated runs agree.
    pub fn with_modeled_cost(
        id: impl Into<String>,
        kernels: Vec<String>,
        range_ms: (f64, f64),
    ) -> Result<Self, DeviceError> {
        let id = id.into();
        let seed = id
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        let cost = ChaCha8Rng::seed_from_u64(seed).gen_range(range_ms.0..=range_ms.1);
        Self::new(id, kernels, cost)
    }

    pub fn contains(&self, kernel: &str) -> bool {
        self.kernels.iter().any(|k| k == kernel)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReprogramPolicy {
    /// Every program request reprograms, even with the same binary loaded.
    #[default]
    Always,
    /// Requests for the already loaded binary are skipped.
    SkipIfLoaded,
}

#[derive(Clone, Debug)]
pub struct DeviceConfig {
    pub cu_count: usize,
    pub reprogram: ReprogramPolicy,
    pub program_cost_range_ms: (f64, f64),
    /// Actually sleep for the modeled programming latency.
    pub sleep_on_program: bool,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            cu_count: 2,
            reprogram: ReprogramPolicy::Always,
            program_cost_range_ms: (100.0, 300.0),
            sleep_on_program: false,
        }
    }
}

/// The share of a batch handled by one compute unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CuAssignment {
    pub cu: usize,
    pub start: usize,
    pub count: usize,
}

/// Split `batch` items over `cus` units; shares differ by at most one and the
/// first units take the remainder.
pub fn split_batch(batch: usize, cus: usize) -> Vec<CuAssignment> {
    let (base, extra) = (batch / cus, batch % cus);
    let mut start = 0;
    (0..cus)
        .map(|cu| {
            let count = base + usize::from(cu < extra);
            let a = CuAssignment { cu, start, count };
            start += count;
            a
        })
        .collect()
}

pub struct Device {
    config: DeviceConfig,
    loaded: Option<KernelBinary>,
    log: EventLog,
}

impl Device {
    pub fn new(config: DeviceConfig) -> Self {
        assert!(config.cu_count > 0, "cu_count must be positive");
        Self {
            config,
            loaded: None,
            log: EventLog::new(),
        }
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    pub fn cu_count(&self) -> usize {
        self.config.cu_count
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn loaded_binary(&self) -> Option<&KernelBinary> {
        self.loaded.as_ref()
    }

    pub fn buffer(&self, label: impl Into<String>, role: BufferRole, size: usize) -> SyncedBuffer {
        SyncedBuffer::new(label, role, size, &self.log)
    }

    pub fn host_buffer(&self, label: impl Into<String>, role: BufferRole, data: Vec<f32>) -> SyncedBuffer {
        SyncedBuffer::from_host(label, role, data, &self.log)
    }

    /// Load `binary`. Returns the programming latency charged, in ms.
    pub fn program(&mut self, binary: &KernelBinary) -> f64 {
        if self.config.reprogram == ReprogramPolicy::SkipIfLoaded
            && self.loaded.as_ref().is_some_and(|b| b.id == binary.id)
        {
            return 0.0;
        }
        self.log.append(Event::Program {
            binary: binary.id.clone(),
            cost_ms: binary.program_cost_ms,
        });
        if self.config.sleep_on_program {
            std::thread::sleep(Duration::from_secs_f64(binary.program_cost_ms / 1e3));
        }
        self.loaded = Some(binary.clone());
        binary.program_cost_ms
    }

    pub fn require_kernel(&self, kernel: &str) -> Result<(), DeviceError> {
        match &self.loaded {
            Some(b) if b.contains(kernel) => Ok(()),
            other => Err(DeviceError::KernelNotLoaded {
                kernel: kernel.to_string(),
                loaded: other.as_ref().map_or_else(|| "nothing loaded".to_string(), |b| b.id.clone()),
            }),
        }
    }

    /// Split `batch` across the compute units and record one launch per unit
    /// that receives work.
    pub fn launch(&self, kernel: &str, batch: usize) -> Result<Vec<CuAssignment>, DeviceError> {
        self.launch_fused(&[kernel], batch)
    }

    /// Like [`Device::launch`] for kernels chained inside one binary: every
    /// kernel is launched on every unit that receives work.
    pub fn launch_fused(&self, kernels: &[&str], batch: usize) -> Result<Vec<CuAssignment>, DeviceError> {
        for k in kernels {
            self.require_kernel(k)?;
        }
        if batch == 0 {
            return Err(DeviceError::EmptyBatch(kernels.join("+")));
        }
        let parts = split_batch(batch, self.config.cu_count);
        for a in parts.iter().filter(|a| a.count > 0) {
            for k in kernels {
                self.log.append(Event::KernelLaunch {
                    kernel: k.to_string(),
                    cu: a.cu,
                    work_items: a.count,
                });
            }
        }
        Ok(parts)
    }

    /// Launch `kernel` and run `work` for each compute unit's share
    /// concurrently. Results come back in compute-unit order.
    pub fn dispatch<T, F>(&self, kernel: &str, batch: usize, work: F) -> Result<Vec<T>, DeviceError>
    where
        T: Send,
        F: Fn(CuAssignment) -> T + Sync,
    {
        self.dispatch_fused(&[kernel], batch, work)
    }

    pub fn dispatch_fused<T, F>(&self, kernels: &[&str], batch: usize, work: F) -> Result<Vec<T>, DeviceError>
    where
        T: Send,
        F: Fn(CuAssignment) -> T + Sync,
    {
        let parts: Vec<_> = self
            .launch_fused(kernels, batch)?
            .into_iter()
            .filter(|a| a.count > 0)
            .collect();
        if parts.len() == 1 {
            return Ok(vec![work(parts[0])]);
        }
        let work = &work;
        Ok(std::thread::scope(|s| {
            let handles: Vec<_> = parts.iter().map(|&a| s.spawn(move || work(a))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("compute unit panicked"))
                .collect()
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn buf(log: &EventLog) -> SyncedBuffer {
        SyncedBuffer::from_host("x", BufferRole::Activation, vec![1.0, 2.0], log)
    }

    #[test]
    fn host_read_from_device_head_transfers_once() {
        let log = EventLog::new();
        let mut b = buf(&log);
        b.mutable_device_data()[0] = 9.0;
        let mark = log.len();
        assert_eq!(b.state(), SyncState::HeadAtDevice);
        assert_eq!(b.host_data().unwrap(), &[9.0, 2.0]);
        assert_eq!(b.state(), SyncState::Synced);
        b.host_data().unwrap();
        let new = log.since(mark);
        assert_eq!(new.len(), 1);
        assert!(matches!(new[0].event, Event::DeviceToHost { bytes: 8, .. }));
    }

    #[test]
    fn synced_reads_are_free() {
        let log = EventLog::new();
        let mut b = buf(&log);
        b.device_data().unwrap();
        assert_eq!(b.state(), SyncState::Synced);
        let mark = log.len();
        b.host_data().unwrap();
        b.device_data().unwrap();
        assert_eq!(log.len(), mark);
    }

    #[test]
    fn host_write_forces_next_device_read_to_upload() {
        let log = EventLog::new();
        let mut b = buf(&log);
        b.device_data().unwrap();
        b.mutable_host_data()[1] = 5.0;
        assert_eq!(b.state(), SyncState::HeadAtHost);
        let mark = log.len();
        assert_eq!(b.device_data().unwrap(), &[1.0, 5.0]);
        assert!(matches!(log.since(mark)[0].event, Event::HostToDevice { .. }));
    }

    #[test]
    fn mutable_access_from_synced_has_no_transfer() {
        let log = EventLog::new();
        let mut b = buf(&log);
        b.device_data().unwrap();
        let mark = log.len();
        b.mutable_host_data();
        assert_eq!(log.len(), mark);
        b.device_data().unwrap();
        let mark = log.len();
        b.mutable_device_data();
        assert_eq!(b.state(), SyncState::HeadAtDevice);
        assert_eq!(log.len(), mark);
    }

    #[test]
    fn uninitialized_access() {
        let log = EventLog::new();
        let mut b = SyncedBuffer::new("y", BufferRole::Activation, 3, &log);
        assert!(matches!(b.host_data(), Err(DeviceError::Uninitialized(_))));
        assert!(matches!(b.device_data(), Err(DeviceError::Uninitialized(_))));
        assert_eq!(b.mutable_host_data(), &[0.0; 3]);
        assert_eq!(b.state(), SyncState::HeadAtHost);

        let mut d = SyncedBuffer::new("z", BufferRole::Activation, 2, &log);
        d.mutable_device_data()[0] = 4.0;
        assert_eq!(d.state(), SyncState::HeadAtDevice);
        assert!(log.is_empty());
    }

    #[test]
    fn kernel_writes_then_host_reads_once() {
        let log = EventLog::new();
        let mut out = SyncedBuffer::new("out", BufferRole::Activation, 4, &log);
        out.mutable_device_data().fill(2.0);
        out.host_data().unwrap();
        out.host_data().unwrap();
        assert_eq!(EventCounts::of(&log.records()).device_to_host, 1);
    }

    #[test]
    fn programming_and_launch_rules() {
        let mut dev = Device::new(DeviceConfig::default());
        let b1 = KernelBinary::with_modeled_cost("b1", vec!["k1".into()], (100.0, 300.0)).unwrap();
        assert!(matches!(dev.launch("k1", 4), Err(DeviceError::KernelNotLoaded { .. })));
        let cost = dev.program(&b1);
        assert!((100.0..=300.0).contains(&cost));
        assert!(dev.launch("k1", 4).is_ok());
        assert!(matches!(dev.launch("k2", 4), Err(DeviceError::KernelNotLoaded { .. })));
        assert!(matches!(dev.launch("k1", 0), Err(DeviceError::EmptyBatch(_))));

        dev.program(&b1);
        let programs = EventCounts::of(&dev.log().records()).programs;
        assert_eq!(programs, 2);

        let mut lazy = Device::new(DeviceConfig {
            reprogram: ReprogramPolicy::SkipIfLoaded,
            ..DeviceConfig::default()
        });
        lazy.program(&b1);
        assert_eq!(lazy.program(&b1), 0.0);
        assert_eq!(EventCounts::of(&lazy.log().records()).programs, 1);
    }

    #[test]
    fn modeled_cost_is_deterministic() {
        let a = KernelBinary::with_modeled_cost("alpha", vec!["k".into()], (100.0, 300.0)).unwrap();
        let b = KernelBinary::with_modeled_cost("alpha", vec!["k".into()], (100.0, 300.0)).unwrap();
        assert_eq!(a.program_cost_ms, b.program_cost_ms);
        assert!(KernelBinary::new("e", vec![], 1.0).is_err());
    }

    #[test]
    fn batch_splits() {
        let counts = |b, c| split_batch(b, c).iter().map(|a| a.count).collect::<Vec<_>>();
        assert_eq!(counts(64, 2), vec![32, 32]);
        assert_eq!(counts(5, 2), vec![3, 2]);
        assert_eq!(counts(1, 2), vec![1, 0]);

        let mut dev = Device::new(DeviceConfig::default());
        dev.program(&KernelBinary::new("b", vec!["k".into()], 150.0).unwrap());
        let mark = dev.log().len();
        dev.launch("k", 1).unwrap();
        assert_eq!(dev.log().since(mark).len(), 1);
    }

    #[test]
    fn dispatch_returns_in_cu_order() {
        let mut dev = Device::new(DeviceConfig {
            cu_count: 3,
            ..DeviceConfig::default()
        });
        dev.program(&KernelBinary::new("b", vec!["k".into()], 150.0).unwrap());
        let got = dev.dispatch("k", 7, |a| (a.cu, a.start, a.count)).unwrap();
        assert_eq!(got, vec![(0, 0, 3), (1, 3, 2), (2, 5, 2)]);
    }

    #[test]
    fn trace_lines() {
        let log = EventLog::new();
        log.append(Event::Program {
            binary: "b1".into(),
            cost_ms: 150.0,
        });
        let mut b = buf(&log);
        b.device_data().unwrap();
        let mut out = Vec::new();
        log.write_lines(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "seq,event_kind,detail,bytes_or_ms\n0,program,b1,150.000\n1,host_to_device,x,8\n"
        );
    }

    #[derive(Clone, Copy, Debug)]
    enum Access {
        HostRead,
        HostWrite,
        DeviceRead,
        DeviceWrite,
    }

    #[derive(Clone, Copy, Debug, PartialEq)]
    enum Transfer {
        Up,
        Down,
    }

    /// The transition table, written out independently of the accessors.
    /// `None` marks an access error.
    fn table(state: SyncState, access: Access) -> Option<(Option<Transfer>, SyncState)> {
        use Access::*;
        use SyncState::*;
        Some(match (state, access) {
            (Uninitialized, HostRead | DeviceRead) => return None,
            (Uninitialized, HostWrite) => (None, HeadAtHost),
            (Uninitialized, DeviceWrite) => (None, HeadAtDevice),
            (HeadAtHost, HostRead) => (None, HeadAtHost),
            (HeadAtHost, HostWrite) => (None, HeadAtHost),
            (HeadAtHost, DeviceRead) => (Some(Transfer::Up), Synced),
            (HeadAtHost, DeviceWrite) => (Some(Transfer::Up), HeadAtDevice),
            (HeadAtDevice, HostRead) => (Some(Transfer::Down), Synced),
            (HeadAtDevice, HostWrite) => (Some(Transfer::Down), HeadAtHost),
            (HeadAtDevice, DeviceRead) => (None, HeadAtDevice),
            (HeadAtDevice, DeviceWrite) => (None, HeadAtDevice),
            (Synced, HostRead) => (None, Synced),
            (Synced, HostWrite) => (None, HeadAtHost),
            (Synced, DeviceRead) => (None, Synced),
            (Synced, DeviceWrite) => (None, HeadAtDevice),
        })
    }

    fn access_strategy() -> impl Strategy<Value = Access> {
        prop_oneof![
            Just(Access::HostRead),
            Just(Access::HostWrite),
            Just(Access::DeviceRead),
            Just(Access::DeviceWrite),
        ]
    }

    proptest! {
        #[test]
        fn accessors_follow_reference_table(
            start_on_host in any::<bool>(),
            seq in proptest::collection::vec((access_strategy(), -5.0f32..5.0), 0..40),
        ) {
            let log = EventLog::new();
            let mut b = if start_on_host {
                SyncedBuffer::from_host("b", BufferRole::Activation, vec![0.5; 3], &log)
            } else {
                SyncedBuffer::new("b", BufferRole::Activation, 3, &log)
            };
            let mut state = b.state();
            let mut expected = Vec::new();
            for (access, value) in seq {
                let step = table(state, access);
                let ok = match access {
                    Access::HostRead => b.host_data().is_ok(),
                    Access::DeviceRead => b.device_data().is_ok(),
                    Access::HostWrite => { b.mutable_host_data()[0] = value; true }
                    Access::DeviceWrite => { b.mutable_device_data()[1] = value; true }
                };
                prop_assert_eq!(ok, step.is_some());
                if let Some((transfer, next)) = step {
                    if let Some(t) = transfer { expected.push(t); }
                    state = next;
                }
                prop_assert_eq!(b.state(), state);
                if state == SyncState::Synced {
                    let (h, d) = b.raw_copies();
                    prop_assert_eq!(h, d);
                }
            }
            let actual: Vec<Transfer> = log.events().iter().map(|e| match e {
                Event::HostToDevice { .. } => Transfer::Up,
                Event::DeviceToHost { .. } => Transfer::Down,
                other => panic!("unexpected event {other:?}"),
            }).collect();
            prop_assert_eq!(actual, expected);
        }

        #[test]
        fn split_is_near_even(batch in 1usize..500, cus in 1usize..9) {
            let parts = split_batch(batch, cus);
            let total: usize = parts.iter().map(|a| a.count).sum();
            prop_assert_eq!(total, batch);
            let max = parts.iter().map(|a| a.count).max().unwrap();
            let min = parts.iter().map(|a| a.count).min().unwrap();
            prop_assert!(max - min <= 1);
            for w in parts.windows(2) {
                prop_assert_eq!(w[0].start + w[0].count, w[1].start);
            }
        }
    }
}
