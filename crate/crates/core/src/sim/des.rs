//! Task-graph event loop.
//!
//! A task runs a list of phases back to back once its admission dependencies
//! are done. Tasks in a lane are admitted in lane order and hold one unit of
//! the lane's pool until they finish; lanes of one rank share that rank's slot
//! pool. Transfers are fluid flows whose rate is the minimum equal share over
//! the ports they cross, recomputed whenever the set of flows changes.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use crate::error::{Error, Result};
use crate::swizzle::LinkClass;

use super::machine::MachineModel;
use super::timeline::{SimEvent, SimEventKind};

pub(crate) type TaskId = usize;

#[derive(Debug, Clone)]
pub(crate) enum Phase {
    /// Hold the slot until every wait dependency is done.
    Wait,
    Delay { kind: SimEventKind, us: f64 },
    /// Link latency, then `bytes` from `src` to `dst` at no more than `cap` per
    /// us. `fifo` flows into one rank are served one at a time, oldest first.
    Flow { src: usize, dst: usize, bytes: f64, cap: f64, fifo: bool },
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Meta {
    pub tile: Option<(usize, usize)>,
    pub chunk: Option<usize>,
    pub label: &'static str,
}

#[derive(Debug, Clone)]
pub(crate) struct Task {
    pub rank: usize,
    pub lane: Option<usize>,
    pub admit: Vec<TaskId>,
    pub wait: Vec<TaskId>,
    pub phases: Vec<Phase>,
    pub meta: Meta,
}

impl Task {
    pub fn new(rank: usize, phases: Vec<Phase>) -> Self {
        Self {
            rank,
            lane: None,
            admit: Vec::new(),
            wait: Vec::new(),
            phases,
            meta: Meta::default(),
        }
    }

    /// A task with no phases that finishes as soon as `deps` are done.
    pub fn join(rank: usize, deps: Vec<TaskId>) -> Self {
        Self::new(rank, Vec::new()).after(deps)
    }

    pub fn after(mut self, deps: impl IntoIterator<Item = TaskId>) -> Self {
        self.admit.extend(deps);
        self
    }

    pub fn waiting_on(mut self, deps: impl IntoIterator<Item = TaskId>) -> Self {
        self.wait.extend(deps);
        if !self.wait.is_empty() {
            self.phases.insert(0, Phase::Wait);
        }
        self
    }

    pub fn in_lane(mut self, lane: usize) -> Self {
        self.lane = Some(lane);
        self
    }

    pub fn tile(mut self, tile: (usize, usize)) -> Self {
        self.meta.tile = Some(tile);
        self
    }

    pub fn chunk(mut self, chunk: usize) -> Self {
        self.meta.chunk = Some(chunk);
        self
    }

    pub fn label(mut self, label: &'static str) -> Self {
        self.meta.label = label;
        self
    }
}

#[derive(Debug, Clone)]
struct Lane {
    pool: usize,
    queue: Vec<TaskId>,
    head: usize,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Graph {
    pub tasks: Vec<Task>,
    lanes: Vec<Lane>,
    pools: Vec<usize>,
}

impl Graph {
    pub fn pool(&mut self, capacity: usize) -> usize {
        self.pools.push(capacity);
        self.pools.len() - 1
    }

    pub fn lane(&mut self, pool: usize) -> usize {
        self.lanes.push(Lane {
            pool,
            queue: Vec::new(),
            head: 0,
        });
        self.lanes.len() - 1
    }

    pub fn add(&mut self, task: Task) -> TaskId {
        let id = self.tasks.len();
        if let Some(l) = task.lane {
            self.lanes[l].queue.push(id);
        }
        self.tasks.push(task);
        id
    }
}

/// Ports of the machine: per-rank send and receive, per-node host bridge and
/// per-node network in each direction.
#[derive(Debug, Clone)]
/// Ports: egress and ingress of every rank, the outbound side of each NUMA
/// domain's host bridge, then the outbound and inbound network of each node.
pub(crate) struct Network {
    tp: usize,
    node: usize,
    numa: usize,
    latency: f64,
    bw: Vec<f64>,
    machine: MachineModel,
}

impl Network {
    pub fn new(machine: &MachineModel, tp: usize) -> Self {
        let node = machine.topology.node_size(tp);
        let numa = machine.topology.numa_size(tp);
        let nodes = tp / node;
        let mut bw = vec![machine.link_bw_bytes_per_us; 2 * tp];
        bw.extend(std::iter::repeat_n(machine.inter_numa_bw(), tp / numa));
        bw.extend(std::iter::repeat_n(machine.inter_node_bw(), 2 * nodes));
        Self {
            tp,
            node,
            numa,
            latency: machine.link_latency_us,
            bw,
            machine: *machine,
        }
    }

    fn ports(&self, src: usize, dst: usize) -> Vec<usize> {
        if src == dst {
            return Vec::new();
        }
        let tp = self.tp;
        let nodes = tp / self.node;
        let net = 2 * tp + tp / self.numa;
        let mut v = vec![src, tp + dst];
        match self.machine.topology.link_class(tp, src, dst) {
            LinkClass::IntraNuma => {}
            LinkClass::InterNuma => v.push(2 * tp + src / self.numa),
            LinkClass::InterNode => {
                v.push(net + src / self.node);
                v.push(net + nodes + dst / self.node);
            }
        }
        v
    }
}

#[derive(Debug)]
struct Flow {
    task: TaskId,
    remaining: f64,
    ports: Vec<usize>,
    fifo_port: Option<usize>,
    cap: f64,
    rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Pending,
    Running,
    Done,
}

enum Work {
    Start(TaskId),
    Enter(TaskId),
}

struct Loop<'g> {
    g: &'g Graph,
    net: &'g Network,
    now: f64,
    status: Vec<Status>,
    admit_left: Vec<usize>,
    wait_left: Vec<usize>,
    phase: Vec<usize>,
    phase_start: Vec<f64>,
    waiting: Vec<bool>,
    in_latency: Vec<bool>,
    admit_out: Vec<Vec<TaskId>>,
    wait_out: Vec<Vec<TaskId>>,
    lane_head: Vec<usize>,
    pool_free: Vec<usize>,
    heap: BinaryHeap<Reverse<(u64, TaskId)>>,
    flows: Vec<Flow>,
    flows_dirty: bool,
    work: VecDeque<Work>,
    done: usize,
    events: Vec<SimEvent>,
}

/// Runs the graph to completion and returns its events ordered by start time.
pub(crate) fn run(g: &Graph, net: &Network) -> Result<Vec<SimEvent>> {
    let n = g.tasks.len();
    let mut admit_out = vec![Vec::new(); n];
    let mut wait_out = vec![Vec::new(); n];
    for (t, task) in g.tasks.iter().enumerate() {
        for &d in &task.admit {
            admit_out[d].push(t);
        }
        for &d in &task.wait {
            wait_out[d].push(t);
        }
    }
    let mut l = Loop {
        g,
        net,
        now: 0.0,
        status: vec![Status::Pending; n],
        admit_left: g.tasks.iter().map(|t| t.admit.len()).collect(),
        wait_left: g.tasks.iter().map(|t| t.wait.len()).collect(),
        phase: vec![0; n],
        phase_start: vec![0.0; n],
        waiting: vec![false; n],
        in_latency: vec![false; n],
        admit_out,
        wait_out,
        lane_head: g.lanes.iter().map(|l| l.head).collect(),
        pool_free: g.pools.clone(),
        heap: BinaryHeap::new(),
        flows: Vec::new(),
        flows_dirty: false,
        work: VecDeque::new(),
        done: 0,
        events: Vec::new(),
    };
    for (t, task) in g.tasks.iter().enumerate() {
        if task.lane.is_none() && task.admit.is_empty() {
            l.work.push_back(Work::Start(t));
        }
    }
    l.run()?;
    let mut events = l.events;
    events.sort_by(|a, b| a.start_us.total_cmp(&b.start_us).then(a.rank.cmp(&b.rank)));
    Ok(events)
}

impl Loop<'_> {
    fn run(&mut self) -> Result<()> {
        let n = self.g.tasks.len();
        loop {
            loop {
                while let Some(w) = self.work.pop_front() {
                    match w {
                        Work::Start(t) => {
                            self.status[t] = Status::Running;
                            self.phase[t] = 0;
                            self.enter(t);
                        }
                        Work::Enter(t) => self.enter(t),
                    }
                }
                if !self.dispatch() {
                    break;
                }
            }
            if self.done == n {
                return Ok(());
            }
            if self.flows_dirty {
                self.rates();
            }
            let next_delay = self.heap.peek().map(|Reverse((b, _))| f64::from_bits(*b));
            let next_flow = self
                .flows
                .iter()
                .filter(|f| f.rate > 0.0)
                .map(|f| self.now + f.remaining / f.rate)
                .fold(f64::INFINITY, f64::min);
            let next = next_delay.unwrap_or(f64::INFINITY).min(next_flow);
            if !next.is_finite() {
                let stuck = (0..n).find(|&t| self.status[t] != Status::Done).unwrap_or(0);
                return Err(Error::Config(format!(
                    "simulation stalled at {:.3} us with task {stuck} on rank {} unfinished",
                    self.now, self.g.tasks[stuck].rank
                )));
            }
            let dt = next - self.now;
            let tol = 1e-9 * next.abs().max(1.0);
            let mut finished = Vec::new();
            for f in &mut self.flows {
                if f.rate > 0.0 && self.now + f.remaining / f.rate <= next + tol {
                    f.remaining = 0.0;
                    finished.push(f.task);
                } else {
                    f.remaining -= f.rate * dt;
                }
            }
            self.now = next;
            if !finished.is_empty() {
                self.flows.retain(|f| f.remaining > 0.0);
                self.flows_dirty = true;
            }
            while let Some(&Reverse((b, t))) = self.heap.peek() {
                if f64::from_bits(b) > self.now {
                    break;
                }
                self.heap.pop();
                if self.in_latency[t] {
                    self.in_latency[t] = false;
                    self.begin_flow(t);
                } else {
                    self.finish_phase(t);
                }
            }
            for t in finished {
                self.finish_phase(t);
            }
        }
    }

    fn dispatch(&mut self) -> bool {
        let mut any = false;
        for (li, lane) in self.g.lanes.iter().enumerate() {
            while self.pool_free[lane.pool] > 0 {
                let Some(&t) = lane.queue.get(self.lane_head[li]) else { break };
                if self.admit_left[t] > 0 {
                    break;
                }
                self.pool_free[lane.pool] -= 1;
                self.lane_head[li] += 1;
                self.work.push_back(Work::Start(t));
                any = true;
            }
        }
        any
    }

    fn enter(&mut self, t: TaskId) {
        let g = self.g;
        let task = &g.tasks[t];
        loop {
            let i = self.phase[t];
            let Some(phase) = task.phases.get(i) else {
                self.complete(t);
                return;
            };
            self.phase_start[t] = self.now;
            match phase {
                Phase::Wait => {
                    if self.wait_left[t] == 0 {
                        self.phase[t] += 1;
                        continue;
                    }
                    self.waiting[t] = true;
                }
                Phase::Delay { us, .. } => {
                    self.heap.push(Reverse(((self.now + us.max(0.0)).to_bits(), t)));
                }
                Phase::Flow { .. } => {
                    if self.net.latency > 0.0 {
                        self.in_latency[t] = true;
                        self.heap.push(Reverse(((self.now + self.net.latency).to_bits(), t)));
                    } else {
                        self.begin_flow(t);
                    }
                }
            }
            return;
        }
    }

    fn begin_flow(&mut self, t: TaskId) {
        let Phase::Flow { src, dst, bytes, cap, fifo } = self.g.tasks[t].phases[self.phase[t]] else {
            unreachable!("flow phase")
        };
        if bytes <= 0.0 {
            self.finish_phase(t);
            return;
        }
        self.flows.push(Flow {
            task: t,
            remaining: bytes,
            ports: self.net.ports(src, dst),
            fifo_port: (fifo && src != dst).then_some(self.net.tp + dst),
            cap,
            rate: 0.0,
        });
        self.flows_dirty = true;
    }

    fn rates(&mut self) {
        let ports = self.net.bw.len();
        // only the oldest queued write per receiving port moves
        let mut head = vec![false; ports];
        let active: Vec<bool> = self
            .flows
            .iter()
            .map(|f| match f.fifo_port {
                Some(p) => !std::mem::replace(&mut head[p], true),
                None => true,
            })
            .collect();
        let mut count = vec![0usize; ports];
        for (f, _) in self.flows.iter().zip(&active).filter(|(_, &a)| a) {
            for &p in &f.ports {
                count[p] += 1;
            }
        }
        for (f, &a) in self.flows.iter_mut().zip(&active) {
            f.rate = if a {
                f.ports
                    .iter()
                    .map(|&p| self.net.bw[p] / count[p] as f64)
                    .fold(f.cap, f64::min)
            } else {
                0.0
            };
        }
        self.flows_dirty = false;
    }

    fn finish_phase(&mut self, t: TaskId) {
        let g = self.g;
        let task = &g.tasks[t];
        let start = self.phase_start[t];
        let mut ev = SimEvent {
            kind: SimEventKind::Wait,
            rank: task.rank,
            start_us: start,
            end_us: self.now,
            tile: task.meta.tile,
            chunk: task.meta.chunk,
            peer: None,
            bytes: None,
            label: task.meta.label.to_string(),
        };
        match task.phases[self.phase[t]] {
            Phase::Wait => {}
            Phase::Delay { kind, .. } => ev.kind = kind,
            Phase::Flow { src, dst, bytes, .. } => {
                ev.kind = SimEventKind::Transfer;
                ev.peer = Some(if task.rank == src { dst } else { src });
                ev.bytes = Some(bytes);
            }
        }
        if ev.kind != SimEventKind::Wait || ev.end_us > ev.start_us {
            self.events.push(ev);
        }
        self.phase[t] += 1;
        self.work.push_back(Work::Enter(t));
    }

    fn complete(&mut self, t: TaskId) {
        self.status[t] = Status::Done;
        self.done += 1;
        if let Some(l) = self.g.tasks[t].lane {
            self.pool_free[self.g.lanes[l].pool] += 1;
        }
        for i in 0..self.admit_out[t].len() {
            let d = self.admit_out[t][i];
            self.admit_left[d] -= 1;
            if self.admit_left[d] == 0 && self.g.tasks[d].lane.is_none() {
                self.work.push_back(Work::Start(d));
            }
        }
        for i in 0..self.wait_out[t].len() {
            let d = self.wait_out[t][i];
            self.wait_left[d] -= 1;
            if self.wait_left[d] == 0 && self.waiting[d] {
                self.waiting[d] = false;
                self.finish_phase(d);
            }
        }
    }
}
