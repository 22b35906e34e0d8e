//! Executes a parsed scenario against a freshly booted system.

use std::collections::HashMap;
use std::fmt::Debug;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use fk_core::oracle::{Tracer, Violation, ViolationKind};
use fk_core::privsep::{DmaMapping, IoHandle, IoKind, KernelStack, Perms, VmSpace};
use fk_core::sched::{TaskStatus, Weight};
use fk_core::{
    alloc_frames, AllocLayout, HeapObject, MapConfig, MemoryMap, PhysAddr, Region, SchedCore, Segment, TaskId, TypeTag,
};
use fk_services::{
    demo_syscall_loop, DemoDevice, EchoDriver, ServiceManifest, Services, SyscallRun, TaskEnd, UserProgram,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scenario::{Action, Cmp, Scenario, Value};

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Overrides the scenario's seed.
    pub seed: Option<u64>,
    /// Guard violations abort the run.
    pub strict_guard: bool,
    /// Attach the UB oracle even if the scenario does not ask for it.
    pub attach: bool,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("run aborted at line {line}: {message}")]
    Aborted { line: usize, message: String },
}

#[derive(Clone, Debug)]
pub struct ExpectOutcome {
    pub line: usize,
    pub path: String,
    pub op: Cmp,
    pub expected: Value,
    pub actual: Option<Value>,
    pub passed: bool,
}

pub struct RunReport {
    pub seed: u64,
    pub log: Vec<String>,
    pub expects: Vec<ExpectOutcome>,
    /// Oracle findings; empty when no oracle was attached.
    pub violations: Vec<Violation>,
    pub oracle_attached: bool,
    pub map: Arc<MemoryMap>,
}

impl RunReport {
    pub fn failed(&self) -> usize {
        self.expects.iter().filter(|e| !e.passed).count()
    }
}

/// Turns `Frame(InUse { frame: 3 })` into `in-use`: the innermost variant
/// name in kebab case.
pub fn error_name(e: &dyn Debug) -> String {
    let s = format!("{e:?}");
    let mut rest = s.as_str();
    let mut name = "";
    loop {
        let end = rest.find(|c: char| !c.is_ascii_alphanumeric() && c != '_').unwrap_or(rest.len());
        if end == 0 {
            break;
        }
        name = &rest[..end];
        match rest[end..].strip_prefix('(') {
            Some(inner) if inner.starts_with(|c: char| c.is_ascii_uppercase()) => rest = inner,
            _ => break,
        }
    }
    let mut out = String::new();
    for (i, c) in name.chars().enumerate() {
        if c.is_ascii_uppercase() {
            if i > 0 {
                out.push('-');
            }
            out.push(c.to_ascii_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

struct State {
    sys: Services,
    tracer: Option<Arc<Tracer>>,
    rng: ChaCha8Rng,
    segs: HashMap<String, Segment>,
    tasks: HashMap<String, TaskId>,
    users: Vec<UserProgram>,
    syscalls: Option<SyscallRun>,
    mappings: HashMap<String, DmaMapping>,
    handles: HashMap<String, IoHandle>,
    drivers: HashMap<String, EchoDriver>,
    responses: HashMap<String, String>,
    stacks: HashMap<String, KernelStack>,
    objects: HashMap<String, HeapObject>,
    vm: VmSpace,
    random_handles: Vec<Segment>,
    random_ops: usize,
    random_mismatches: usize,
    last: Value,
}

fn ok() -> Value {
    Value::Str("ok".into())
}

fn no_handle() -> Value {
    Value::Str("no-handle".into())
}

fn outcome<T, E: Debug>(r: Result<T, E>) -> Value {
    match r {
        Ok(_) => ok(),
        Err(e) => Value::Str(error_name(&e)),
    }
}

fn status_name(s: TaskStatus) -> &'static str {
    match s {
        TaskStatus::Runnable => "runnable",
        TaskStatus::Running => "running",
        TaskStatus::Sleeping => "sleeping",
        TaskStatus::Exited => "exited",
    }
}

impl State {
    fn boot(sc: &Scenario, opts: &RunOptions) -> Result<Self, RunError> {
        let c = &sc.config;
        let setup = |e: &dyn std::fmt::Display| RunError::Setup(e.to_string());
        let total = c.frame_size.checked_mul(c.frame_count).ok_or_else(|| RunError::Setup("memory size overflows".into()))?;
        let regions = if c.regions.is_empty() { vec![Region::new(0, total)] } else { c.regions.clone() };
        let tracer = (opts.attach || c.oracle).then(|| Tracer::new(c.frame_size));
        let mut mc = MapConfig::new(c.frame_size, c.frame_count, regions).with_faults(c.faults);
        if let Some(t) = &tracer {
            mc = mc.with_tracer(Arc::clone(t));
        }
        let map = MemoryMap::new(mc).map_err(|e| setup(&e))?;
        let sched = if opts.strict_guard { SchedCore::new_strict(c.cpus) } else { SchedCore::new(c.cpus) };
        let manifest = ServiceManifest {
            cpus: c.cpus,
            scheduler: c.scheduler,
            buddy: c.buddy,
            slab_classes: c.slab_classes.clone(),
            ..Default::default()
        };
        let sys = Services::boot(&map, sched, manifest).map_err(|e| setup(&e))?;
        for (kind, range, s) in &c.labels {
            sys.io.label(*kind, range.clone(), *s).map_err(|e| setup(&e))?;
        }
        for d in &c.devices {
            let irq = d.irq.map(|v| (Arc::clone(&sys.irq), v));
            let dev = Arc::new(DemoDevice::new(d.id, Arc::clone(&sys.iommu), irq));
            EchoDriver::install(&sys, dev, d.window.clone()).map_err(|e| setup(&e))?;
        }
        sys.io.seal();
        let mut drivers = HashMap::new();
        for d in &c.devices {
            drivers.insert(d.name.clone(), EchoDriver::open(&sys, d.window.clone(), d.buffer_frames).map_err(|e| setup(&e))?);
        }
        let seed = opts.seed.unwrap_or(c.seed);
        let fs = c.frame_size;
        Ok(Self {
            sys,
            tracer,
            rng: ChaCha8Rng::seed_from_u64(seed),
            segs: HashMap::new(),
            tasks: HashMap::new(),
            users: Vec::new(),
            syscalls: None,
            mappings: HashMap::new(),
            handles: HashMap::new(),
            drivers,
            responses: HashMap::new(),
            stacks: HashMap::new(),
            objects: HashMap::new(),
            vm: VmSpace::new(fs),
            random_handles: Vec::new(),
            random_ops: 0,
            random_mismatches: 0,
            last: ok(),
        })
    }

    fn map(&self) -> &Arc<MemoryMap> {
        &self.sys.map
    }

    fn task_name(&self, id: TaskId) -> String {
        if let Some((n, _)) = self.tasks.iter().find(|(_, &t)| t == id) {
            return n.clone();
        }
        if let Some(t) = self.syscalls.as_ref().and_then(|r| r.tasks.iter().find(|t| t.id == id)) {
            return t.name.clone();
        }
        id.to_string()
    }

    fn usable(&self, frame: usize) -> bool {
        let fs = self.map().frame_size();
        let (a, b) = (frame * fs, frame * fs + fs);
        self.map().usable().iter().any(|r| r.start.0 <= a && b <= r.start.0 + r.len)
    }

    /// Random claims, duplicates and drops of single frames, each checked
    /// against a shadow of the reference counts.
    fn random_ops(&mut self, count: usize) -> String {
        let map = Arc::clone(self.map());
        let fs = map.frame_size();
        let mut shadow: Vec<u32> = map.meta_all().iter().map(|m| m.ref_count).collect();
        let mut mismatches = 0;
        for _ in 0..count {
            let pick = if self.random_handles.is_empty() { 0 } else { self.rng.gen_range(0..3) };
            match pick {
                0 => {
                    let f = self.rng.gen_range(0..map.frame_count());
                    let want = shadow[f] == 0 && self.usable(f);
                    match Segment::from_unused(&map, PhysAddr(f * fs), 1, fk_core::MetaKindId::UNTYPED, &[]) {
                        Ok(s) => {
                            mismatches += !want as usize;
                            shadow[f] += 1;
                            self.random_handles.push(s);
                        }
                        Err(_) => mismatches += want as usize,
                    }
                }
                1 => {
                    let i = self.rng.gen_range(0..self.random_handles.len());
                    let s = self.random_handles[i].clone();
                    shadow[s.first_frame()] += 1;
                    self.random_handles.push(s);
                }
                _ => {
                    let i = self.rng.gen_range(0..self.random_handles.len());
                    let s = self.random_handles.swap_remove(i);
                    shadow[s.first_frame()] -= 1;
                }
            }
            let actual: Vec<u32> = map.meta_all().iter().map(|m| m.ref_count).collect();
            mismatches += (actual != shadow) as usize;
        }
        self.random_ops += count;
        self.random_mismatches += mismatches;
        format!("{count} ops, {mismatches} mismatches")
    }

    fn act(&mut self, a: &Action) -> String {
        let map = Arc::clone(self.map());
        let fs = map.frame_size();
        let last = match a {
            Action::Alloc { name, frames, kind } => {
                match AllocLayout::frames(*frames, fs).and_then(|l| alloc_frames(&map, l, *kind, &[])) {
                    Ok(s) => {
                        let v = Value::Str(format!("frame {}", s.first_frame()));
                        self.segs.insert(name.clone(), s);
                        v
                    }
                    Err(e) => Value::Str(error_name(&e)),
                }
            }
            Action::Claim { name, frame, count } => {
                let r = Segment::from_unused(&map, PhysAddr(frame * fs), *count, fk_core::MetaKindId::UNTYPED, &[]);
                let v = outcome(r.as_ref().map(|_| ()));
                if let Ok(s) = r {
                    self.segs.insert(name.clone(), s);
                }
                v
            }
            Action::Dup { name, from } => match self.segs.get(from).cloned() {
                Some(s) => {
                    self.segs.insert(name.clone(), s);
                    ok()
                }
                None => no_handle(),
            },
            Action::Drop { name } => match self.segs.remove(name) {
                Some(s) => {
                    drop(s);
                    ok()
                }
                None => no_handle(),
            },
            Action::Write { name, offset, data } => match self.segs.get(name) {
                Some(s) => outcome(s.write_bytes(*offset, data)),
                None => no_handle(),
            },
            Action::Read { name, offset, len } => match self.segs.get(name).map(|s| s.read_bytes(*offset, *len)) {
                Some(Ok(b)) => Value::Str(text(&b)),
                Some(Err(e)) => Value::Str(error_name(&e)),
                None => no_handle(),
            },
            Action::RandomOps { count } => Value::Str(self.random_ops(*count)),
            Action::Spawn { name, script, weight } => {
                let r = match weight {
                    Some(w) => self.sys.sched.task_spawn(script.clone(), Weight(*w)),
                    None => self.sys.sched.task_spawn(script.clone(), name.clone()),
                };
                match r {
                    Ok(id) => {
                        self.tasks.insert(name.clone(), id);
                        ok()
                    }
                    Err(e) => Value::Str(error_name(&e)),
                }
            }
            Action::Tick { cpu, times } => {
                let mut v = ok();
                for _ in 0..*times {
                    if let Err(e) = self.sys.sched.tick(*cpu) {
                        v = Value::Str(error_name(&e));
                        break;
                    }
                }
                v
            }
            Action::Yield { cpu } => outcome(self.sys.sched.task_yield(*cpu)),
            Action::Sleep { cpu } => outcome(self.sys.sched.task_sleep(*cpu)),
            Action::Exit { cpu } => outcome(self.sys.sched.task_exit(*cpu)),
            Action::Wake { name } => match self.tasks.get(name) {
                Some(&id) => outcome(self.sys.sched.task_wake(id)),
                None => no_handle(),
            },
            Action::User { name, frames, program } => {
                self.users.push(UserProgram { name: name.clone(), ops: program.clone(), frames: *frames });
                ok()
            }
            Action::RunSyscalls { budget } => {
                let programs = std::mem::take(&mut self.users);
                match demo_syscall_loop(&self.sys, &programs, *budget) {
                    Ok(run) => {
                        let v = Value::Str(format!("{} traps in {} steps", run.traps.len(), run.steps));
                        self.syscalls = Some(run);
                        v
                    }
                    Err(e) => Value::Str(error_name(&e)),
                }
            }
            Action::VmMap { seg, vaddr } => match self.segs.get(seg) {
                Some(s) => outcome(self.vm.map_segment(*vaddr, s, Perms::RW)),
                None => no_handle(),
            },
            Action::DmaMap { name, seg, direction, mode } => match self.segs.get(seg) {
                Some(s) => match self.sys.iommu.dma_map(s, *mode, *direction) {
                    Ok(m) => {
                        let v = Value::Str(format!("iova {:#x}", m.iova()));
                        self.mappings.insert(name.clone(), m);
                        v
                    }
                    Err(e) => Value::Str(error_name(&e)),
                },
                None => no_handle(),
            },
            Action::DmaUnmap { name } => {
                self.mappings.remove(name);
                ok()
            }
            Action::DmaWrite { device, mapping, offset, data } => {
                let base = self.mappings.get(mapping).map_or(0, |m| m.iova()) as i64;
                let iova = base.wrapping_add(*offset) as usize;
                match self.sys.iommu.device_dma_write(*device, iova, data) {
                    Ok(()) => ok(),
                    Err(_) => Value::Str("blocked".into()),
                }
            }
            Action::Acquire { name, kind, range } => {
                let r = match kind {
                    IoKind::Mem => self.sys.io.iomem_acquire(range.clone()),
                    IoKind::Port => self.sys.io.ioport_acquire(range.clone()),
                };
                match r {
                    Ok(h) => {
                        self.handles.insert(name.clone(), h);
                        ok()
                    }
                    Err(e) => Value::Str(error_name(&e)),
                }
            }
            Action::Release { name } => {
                self.handles.remove(name);
                ok()
            }
            Action::IrqRegister { vec, handler } => outcome(self.sys.irq.register(*vec, *handler)),
            Action::Authorize { device, vec } => outcome(self.sys.irq.authorize(*device, *vec)),
            Action::Raise { device, vec } => Value::Str(error_name(&self.sys.irq.device_raise(*device, *vec))),
            Action::MapBuffer { device } => outcome(self.drivers.get_mut(device).unwrap().map_buffer()),
            Action::UnmapBuffer { device } => {
                self.drivers.get_mut(device).unwrap().unmap_buffer();
                ok()
            }
            Action::Request { device, data } => match self.drivers[device].request(data) {
                Ok(resp) => {
                    self.responses.insert(device.clone(), text(&resp));
                    Value::Str(text(&resp))
                }
                Err(e) => Value::Str(error_name(&e)),
            },
            Action::Stack { name, frames } => match KernelStack::new(&map, *frames) {
                Ok(s) => {
                    self.stacks.insert(name.clone(), s);
                    ok()
                }
                Err(e) => Value::Str(error_name(&e)),
            },
            Action::StackWrite { name, offset, data } => match self.stacks.get(name) {
                Some(s) => outcome(s.write(*offset, data)),
                None => no_handle(),
            },
            Action::HeapAlloc { name, size, align } => match &self.sys.heap {
                Some((heap, _)) => match heap.alloc(TypeTag::new(*size, *align)) {
                    Ok(o) => {
                        self.objects.insert(name.clone(), o);
                        ok()
                    }
                    Err(e) => Value::Str(error_name(&e)),
                },
                None => Value::Str("no-heap".into()),
            },
            Action::HeapWrite { name, offset, data } => match self.objects.get(name) {
                Some(o) => outcome(o.write(*offset, data)),
                None => no_handle(),
            },
            Action::HeapFree { name } => match (self.objects.remove(name), &self.sys.heap) {
                (Some(o), Some((heap, _))) => outcome(heap.free(o)),
                _ => no_handle(),
            },
            Action::Expect { .. } => unreachable!(),
        };
        let shown = last.to_string();
        self.last = last;
        shown
    }

    fn violations(&self) -> Vec<Violation> {
        self.tracer.as_ref().map(|t| t.violations()).unwrap_or_default()
    }

    fn observe(&self, path: &str) -> Option<Value> {
        let int = |n: usize| Some(Value::Int(n as i64));
        let s = |x: &str| Some(Value::Str(x.to_string()));
        let (head, tail) = path.rsplit_once('.').unwrap_or((path, ""));
        match path {
            "last" => return Some(self.last.clone()),
            "random.mismatches" => return int(self.random_mismatches),
            "random.ops" => return int(self.random_ops),
            "sched.guard_violations" => return int(self.sys.sched.guard_violations()),
            "sched.double_booked" => return int(self.sys.sched.double_booked()),
            "sched.consistent" => return s(if self.sys.sched.check_consistency().is_ok() { "true" } else { "false" }),
            "traps.count" => return int(self.syscalls.as_ref().map_or(0, |r| r.traps.len())),
            "traps.order" => {
                let order = self.syscalls.as_ref().map(|r| r.trap_order()).unwrap_or_default();
                return s(&order.iter().map(|&id| self.task_name(id)).collect::<Vec<_>>().join(","));
            }
            "dma.blocked" => return int(self.sys.iommu.blocked().len()),
            "dma.landed" => return int(self.sys.iommu.landed_writes()),
            "irq.delivered" => return int(self.sys.irq.deliveries().len()),
            "irq.dropped" => return int(self.sys.irq.dropped().len()),
            "io.handles" => return int(self.sys.io.live_handles().len()),
            "oracle.violations" => return int(self.violations().len()),
            "oracle.races" | "oracle.mutability" | "oracle.released" => {
                let kind = match tail {
                    "races" => ViolationKind::DataRace,
                    "mutability" => ViolationKind::MutabilityViolation,
                    _ => ViolationKind::UseAfterRelease,
                };
                return int(self.violations().iter().filter(|v| v.kind == kind).count());
            }
            _ => {}
        }
        if head == "census" || head == "census.ref" {
            let metas = self.map().meta_all();
            return match (head, tail) {
                ("census", "unused") => int(metas.iter().filter(|m| m.state.is_unused()).count()),
                ("census", "claimed") => int(metas.iter().filter(|m| !m.state.is_unused()).count()),
                ("census", "untyped") => int(metas.iter().filter(|m| m.state.is_untyped()).count()),
                ("census", "typed") => {
                    int(metas.iter().filter(|m| !m.state.is_unused() && !m.state.is_untyped()).count())
                }
                ("census", "refs") => int(metas.iter().map(|m| m.ref_count as usize).sum()),
                (_, f) => f.parse::<usize>().ok().and_then(|f| metas.get(f)).and_then(|m| int(m.ref_count as usize)),
            };
        }
        match head {
            "sched.current" => {
                let cpu: usize = tail.parse().ok().filter(|&c| c < self.sys.sched.cpu_count())?;
                match self.sys.sched.current(cpu) {
                    Some(id) => s(&self.task_name(id)),
                    None => s("idle"),
                }
            }
            "sched.status" | "sched.runtime" => {
                let id = *self.tasks.get(tail)?;
                let t = self.sys.sched.task(id)?;
                if head == "sched.status" {
                    s(status_name(t.status()))
                } else {
                    int(t.runtime() as usize)
                }
            }
            "output" | "end" => {
                let t = self.syscalls.as_ref()?.task(tail)?;
                if head == "output" {
                    return s(&text(&t.output));
                }
                s(match t.end {
                    None => "running",
                    Some(TaskEnd::Exited) => "exited",
                    Some(TaskEnd::UnknownSyscall(_)) => "unknown-syscall",
                    Some(TaskEnd::PageFault { .. }) => "page-fault",
                })
            }
            "response" => s(self.responses.get(tail)?),
            "stack" => s(if self.stacks.get(tail)?.guard_intact() { "intact" } else { "damaged" }),
            _ => None,
        }
    }
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
}

pub fn run_scenario(sc: &Scenario, opts: &RunOptions) -> Result<RunReport, RunError> {
    let mut st = State::boot(sc, opts)?;
    let seed = opts.seed.unwrap_or(sc.config.seed);
    let mut log = Vec::new();
    let mut expects = Vec::new();
    for step in &sc.steps {
        if let Action::Expect { path, op, value } = &step.action {
            let actual = st.observe(path);
            let passed = actual.as_ref().and_then(|a| a.compare(*op, value)).unwrap_or(false);
            let shown = actual.as_ref().map_or("nothing".to_string(), Value::quoted);
            log.push(format!(
                "{:>4} expect {path} {} {}: {} (got {shown})",
                step.line,
                op.symbol(),
                value.quoted(),
                if passed { "pass" } else { "FAIL" }
            ));
            expects.push(ExpectOutcome { line: step.line, path: path.clone(), op: *op, expected: value.clone(), actual, passed });
            continue;
        }
        let r = catch_unwind(AssertUnwindSafe(|| st.act(&step.action)));
        match r {
            Ok(shown) => log.push(format!("{:>4} {} -> {shown}", step.line, step.action.verb())),
            Err(p) => return Err(RunError::Aborted { line: step.line, message: panic_message(&*p) }),
        }
    }
    let violations = st.violations();
    Ok(RunReport {
        seed,
        log,
        expects,
        violations,
        oracle_attached: st.tracer.is_some(),
        map: Arc::clone(st.map()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_names() {
        #[derive(Debug)]
        #[allow(dead_code)]
        enum Inner {
            InUse { frame: usize },
            SensitiveRange(std::ops::Range<usize>),
        }
        #[derive(Debug)]
        #[allow(dead_code)]
        enum Outer {
            Frame(Inner),
            DeviceTimeout { steps: usize },
        }
        assert_eq!(error_name(&Outer::Frame(Inner::InUse { frame: 3 })), "in-use");
        assert_eq!(error_name(&Outer::Frame(Inner::SensitiveRange(1..2))), "sensitive-range");
        assert_eq!(error_name(&Outer::DeviceTimeout { steps: 1 }), "device-timeout");
    }

    #[test]
    fn handles_from_failed_actions_are_missing_not_fatal() {
        let text = "[config]\nframe_count = 4\n\n[actions]\nstack st 8\nstack-write st 0 \"x\"\nexpect last == no-handle\n";
        let sc = crate::parse_scenario(text).unwrap();
        let report = run_scenario(&sc, &RunOptions::default()).unwrap();
        assert_eq!(report.failed(), 0, "{:?}", report.log);
    }
}
