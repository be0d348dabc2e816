//! Two-level operator pipeline.
//!
//! An epoch decomposes into per-batch operators (per-hop sampling, cache
//! lookup, miss submission, an IO-completion rendezvous, batch assembly,
//! training). The plan encodes two dependency levels: hop `h` must be sampled
//! before hop `h+1` (and before its own lookup), and a batch must be fully
//! generated before its training step. Across batches only the train chain
//! orders anything; everything else overlaps, bounded by `pipeline_depth`
//! in-flight batches and per-kind worker budgets.

use std::collections::VecDeque;
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};

use crate::error::{EngineError, Result};
use crate::metrics::{OpKindTag, SpanSink};

/// Operator kind, with the hop index where applicable. Hop 0 is the seed
/// level: `Lookup(0)`/`Submit(0)` serve seed features, `Sample(h)` produces
/// the hop-`h` frontier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Sample(u32),
    Lookup(u32),
    Submit(u32),
    Complete,
    BatchGen,
    Train,
}

impl OpKind {
    pub fn tag(&self) -> OpKindTag {
        match self {
            OpKind::Sample(_) => OpKindTag::Sample,
            OpKind::Lookup(_) => OpKindTag::Lookup,
            OpKind::Submit(_) => OpKindTag::Submit,
            OpKind::Complete => OpKindTag::Complete,
            OpKind::BatchGen => OpKindTag::BatchGen,
            OpKind::Train => OpKindTag::Train,
        }
    }

    pub fn hop(&self) -> u32 {
        match self {
            OpKind::Sample(h) | OpKind::Lookup(h) | OpKind::Submit(h) => *h,
            _ => 0,
        }
    }
}

/// One schedulable operator instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Operator {
    pub kind: OpKind,
    pub batch: u64,
}

/// Per-kind concurrency limits. The scheduler never runs more operators of a
/// kind than its budget, and the worker thread count caps the total.
#[derive(Debug, Clone, Copy)]
pub struct Budget {
    per_kind: [usize; 6],
}

impl Budget {
    /// One worker per operator kind: train and preparation stages of
    /// neighboring batches overlap fully while same-kind operators of
    /// different batches queue behind each other.
    pub fn uniform() -> Self {
        Budget { per_kind: [1; 6] }
    }

    pub fn with_limit(mut self, tag: OpKindTag, limit: usize) -> Self {
        self.per_kind[Self::slot(tag)] = limit.max(1);
        self
    }

    pub fn limit(&self, tag: OpKindTag) -> usize {
        self.per_kind[Self::slot(tag)]
    }

    pub fn total(&self) -> usize {
        self.per_kind.iter().sum()
    }

    fn slot(tag: OpKindTag) -> usize {
        OpKindTag::ALL.iter().position(|&t| t == tag).unwrap()
    }
}

/// The per-batch operator DAG plus the in-flight batch bound.
#[derive(Debug, Clone)]
pub struct ExecutionPlan {
    hops: u32,
    depth: usize,
    /// Template in canonical serial order (a topological order by
    /// construction; validated at build time).
    template: Vec<OpKind>,
    /// Edges as template indices, always forward.
    edges: Vec<(usize, usize)>,
}

/// Builds the plan for a `hops`-hop model with at most `depth` batches in
/// flight.
pub fn build_plan(hops: usize, depth: usize) -> Result<ExecutionPlan> {
    if hops == 0 {
        return Err(EngineError::Config("pipeline needs at least one hop".into()));
    }
    if depth == 0 {
        return Err(EngineError::Config("pipeline_depth must be >= 1".into()));
    }
    let hops = hops as u32;

    // Canonical serial order: seed lookup and submit, then per hop
    // sample/lookup/submit, then the completion rendezvous, assembly, train.
    let mut template = vec![OpKind::Lookup(0), OpKind::Submit(0)];
    for h in 1..=hops {
        template.push(OpKind::Sample(h));
        template.push(OpKind::Lookup(h));
        template.push(OpKind::Submit(h));
    }
    template.extend([OpKind::Complete, OpKind::BatchGen, OpKind::Train]);

    let at = |k: OpKind| template.iter().position(|&t| t == k).unwrap();
    let mut edges = Vec::new();
    for h in 0..=hops {
        edges.push((at(OpKind::Lookup(h)), at(OpKind::Submit(h))));
        edges.push((at(OpKind::Lookup(h)), at(OpKind::BatchGen)));
        edges.push((at(OpKind::Submit(h)), at(OpKind::Complete)));
        if h >= 1 {
            edges.push((at(OpKind::Sample(h)), at(OpKind::Lookup(h))));
            if h < hops {
                edges.push((at(OpKind::Sample(h)), at(OpKind::Sample(h + 1))));
            }
        }
    }
    edges.push((at(OpKind::Complete), at(OpKind::BatchGen)));
    edges.push((at(OpKind::Sample(hops)), at(OpKind::BatchGen)));
    edges.push((at(OpKind::BatchGen), at(OpKind::Train)));

    let plan = ExecutionPlan {
        hops,
        depth,
        template,
        edges,
    };
    plan.validate()?;
    Ok(plan)
}

impl ExecutionPlan {
    pub fn hops(&self) -> u32 {
        self.hops
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn ops_per_batch(&self) -> usize {
        self.template.len()
    }

    /// The canonical serial order of one batch's operators.
    pub fn serial_order(&self) -> &[OpKind] {
        &self.template
    }

    pub fn edges(&self) -> impl Iterator<Item = (OpKind, OpKind)> + '_ {
        self.edges.iter().map(|&(a, b)| (self.template[a], self.template[b]))
    }

    fn validate(&self) -> Result<()> {
        // Template order must be a topological order (all edges forward) and
        // every operator must be reachable from a root through the DAG.
        for &(src, dst) in &self.edges {
            if src >= dst {
                return Err(EngineError::Config(format!(
                    "plan edge {:?} -> {:?} is not forward",
                    self.template[src], self.template[dst]
                )));
            }
        }
        let n = self.template.len();
        let mut indeg = vec![0usize; n];
        for &(_, dst) in &self.edges {
            indeg[dst] += 1;
        }
        // Kahn's pass as an explicit acyclicity check.
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        let mut indeg = indeg;
        while let Some(i) = queue.pop_front() {
            seen += 1;
            for &(s, d) in &self.edges {
                if s == i {
                    indeg[d] -= 1;
                    if indeg[d] == 0 {
                        queue.push_back(d);
                    }
                }
            }
        }
        if seen != n {
            return Err(EngineError::Config("plan DAG has a cycle".into()));
        }
        Ok(())
    }

    fn in_degrees(&self) -> Vec<usize> {
        let mut indeg = vec![0usize; self.template.len()];
        for &(_, dst) in &self.edges {
            indeg[dst] += 1;
        }
        indeg
    }

    fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.template.len()];
        for &(src, dst) in &self.edges {
            ch[src].push(dst);
        }
        ch
    }
}

/// What the executor drives: the engine implements one method that runs a
/// single operator to completion.
pub trait OpRunner: Sync {
    fn run(&self, op: Operator) -> Result<()>;
}

/// Runs all operators of all batches strictly one at a time in the canonical
/// order: the NoPipe baseline, and the behavior of `execute` at depth 1.
pub fn run_serial(plan: &ExecutionPlan, runner: &dyn OpRunner, num_batches: u64, sink: &SpanSink) -> Result<()> {
    for batch in 0..num_batches {
        for &kind in &plan.template {
            let op = Operator { kind, batch };
            let start = sink.now_us();
            runner.run(op)?;
            sink.record(kind.tag(), kind.hop(), batch, start, sink.now_us());
        }
    }
    Ok(())
}

/// Serial execution with unlimited budgets: the explicit NoPipe ablation.
pub fn run_nopipe(plan: &ExecutionPlan, runner: &dyn OpRunner, num_batches: u64, sink: &SpanSink) -> Result<()> {
    run_serial(plan, runner, num_batches, sink)
}

struct SchedState {
    ready: Vec<VecDeque<(u64, usize)>>,
    running: [usize; 6],
    /// Remaining dependency count per (batch, template index).
    deps: Vec<Vec<usize>>,
    admitted: u64,
    inflight: usize,
    trains_done: u64,
    completed_ops: u64,
    error: Option<EngineError>,
}

struct Sched<'a> {
    plan: &'a ExecutionPlan,
    budget: Budget,
    num_batches: u64,
    children: Vec<Vec<usize>>,
    base_indeg: Vec<usize>,
    train_idx: usize,
    state: Mutex<SchedState>,
    cond: Condvar,
}

impl Sched<'_> {
    fn total_ops(&self) -> u64 {
        self.num_batches * self.plan.ops_per_batch() as u64
    }

    /// Admits batches while fewer than `depth` are in flight.
    fn admit_locked(&self, st: &mut SchedState) {
        while st.inflight < self.plan.depth && st.admitted < self.num_batches {
            let batch = st.admitted;
            st.admitted += 1;
            st.inflight += 1;
            let mut deps = self.base_indeg.clone();
            // Cross-batch train chain: Train(batch) also waits on
            // Train(batch-1) unless it already finished.
            if batch > 0 && st.trains_done < batch {
                deps[self.train_idx] += 1;
            }
            for (idx, &d) in deps.iter().enumerate() {
                if d == 0 {
                    st.ready[tag_slot(self.plan.template[idx].tag())].push_back((batch, idx));
                }
            }
            st.deps.push(deps);
        }
    }

    fn pick_locked(&self, st: &mut SchedState) -> Option<(u64, usize)> {
        // Keep the train chain hot, then the stages closest to batch
        // completion, then preparation.
        const ORDER: [OpKindTag; 6] = [
            OpKindTag::Train,
            OpKindTag::BatchGen,
            OpKindTag::Complete,
            OpKindTag::Submit,
            OpKindTag::Lookup,
            OpKindTag::Sample,
        ];
        for tag in ORDER {
            let slot = tag_slot(tag);
            if st.running[slot] < self.budget.limit(tag) {
                if let Some(node) = st.ready[slot].pop_front() {
                    st.running[slot] += 1;
                    return Some(node);
                }
            }
        }
        None
    }

    fn finish_locked(&self, st: &mut SchedState, batch: u64, idx: usize) {
        st.completed_ops += 1;
        for &child in &self.children[idx] {
            let d = &mut st.deps[batch as usize][child];
            *d -= 1;
            if *d == 0 {
                st.ready[tag_slot(self.plan.template[child].tag())].push_back((batch, child));
            }
        }
        if self.plan.template[idx] == OpKind::Train {
            st.trains_done = batch + 1;
            st.inflight -= 1;
            // Release the chain dependency of the next batch if it is
            // already instantiated.
            let next = batch + 1;
            if next < st.admitted {
                let d = &mut st.deps[next as usize][self.train_idx];
                *d -= 1;
                if *d == 0 {
                    st.ready[tag_slot(OpKindTag::Train)].push_back((next, self.train_idx));
                }
            }
            self.admit_locked(st);
        }
    }
}

fn tag_slot(tag: OpKindTag) -> usize {
    OpKindTag::ALL.iter().position(|&t| t == tag).unwrap()
}

/// Executes the plan with `threads` scheduler workers. Depth 1 degenerates to
/// the serial baseline.
pub fn execute(
    plan: &ExecutionPlan,
    runner: &dyn OpRunner,
    num_batches: u64,
    budget: Budget,
    threads: usize,
    sink: &SpanSink,
) -> Result<()> {
    if plan.depth == 1 {
        return run_serial(plan, runner, num_batches, sink);
    }
    if num_batches == 0 {
        return Ok(());
    }

    let sched = Arc::new(Sched {
        plan,
        budget,
        num_batches,
        children: plan.children(),
        base_indeg: plan.in_degrees(),
        train_idx: plan.template.len() - 1,
        state: Mutex::new(SchedState {
            ready: (0..6).map(|_| VecDeque::new()).collect(),
            running: [0; 6],
            deps: Vec::new(),
            admitted: 0,
            inflight: 0,
            trains_done: 0,
            completed_ops: 0,
            error: None,
        }),
        cond: Condvar::new(),
    });
    sched.admit_locked(&mut sched.state.lock());

    std::thread::scope(|scope| {
        for _ in 0..threads.max(1) {
            let sched = Arc::clone(&sched);
            scope.spawn(move || loop {
                let node = {
                    let mut st = sched.state.lock();
                    loop {
                        if st.error.is_some() || st.completed_ops == sched.total_ops() {
                            return;
                        }
                        if let Some(node) = sched.pick_locked(&mut st) {
                            break node;
                        }
                        sched.cond.wait(&mut st);
                    }
                };
                let (batch, idx) = node;
                let kind = sched.plan.template[idx];
                let start = sink.now_us();
                let result = runner.run(Operator { kind, batch });
                sink.record(kind.tag(), kind.hop(), batch, start, sink.now_us());

                let mut st = sched.state.lock();
                st.running[tag_slot(kind.tag())] -= 1;
                match result {
                    Ok(()) => sched.finish_locked(&mut st, batch, idx),
                    Err(e) => {
                        if st.error.is_none() {
                            st.error = Some(e);
                        }
                    }
                }
                sched.cond.notify_all();
            });
        }
    });

    let mut st = sched.state.lock();
    match st.error.take() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use parking_lot::Mutex as PMutex;
    use std::collections::HashMap;

    #[test]
    fn plan_operator_counts() {
        assert_eq!(build_plan(1, 1).unwrap().ops_per_batch(), 8);
        assert_eq!(build_plan(2, 2).unwrap().ops_per_batch(), 11);
        assert_eq!(build_plan(3, 2).unwrap().ops_per_batch(), 14);
    }

    #[test]
    fn plan_rejects_zero_hops() {
        assert!(build_plan(0, 1).is_err());
        assert!(build_plan(2, 0).is_err());
    }

    #[test]
    fn two_hop_template_matches_expected_multiset() {
        let plan = build_plan(2, 2).unwrap();
        let mut counts: HashMap<OpKindTag, usize> = HashMap::new();
        for op in plan.serial_order() {
            *counts.entry(op.tag()).or_default() += 1;
        }
        assert_eq!(counts[&OpKindTag::Sample], 2);
        assert_eq!(counts[&OpKindTag::Lookup], 3);
        assert_eq!(counts[&OpKindTag::Submit], 3);
        assert_eq!(counts[&OpKindTag::Complete], 1);
        assert_eq!(counts[&OpKindTag::BatchGen], 1);
        assert_eq!(counts[&OpKindTag::Train], 1);
    }

    /// Runner that records execution order and optionally sleeps.
    struct LogRunner {
        log: PMutex<Vec<Operator>>,
        op_cost: std::time::Duration,
    }

    impl OpRunner for LogRunner {
        fn run(&self, op: Operator) -> Result<()> {
            if !self.op_cost.is_zero() {
                std::thread::sleep(self.op_cost);
            }
            self.log.lock().push(op);
            Ok(())
        }
    }

    fn check_dependencies(plan: &ExecutionPlan, log: &[Operator], num_batches: u64) {
        let position: HashMap<(u64, OpKind), usize> = log
            .iter()
            .enumerate()
            .map(|(i, op)| ((op.batch, op.kind), i))
            .collect();
        assert_eq!(position.len(), log.len(), "every op runs exactly once");
        for batch in 0..num_batches {
            for (src, dst) in plan.edges() {
                assert!(
                    position[&(batch, src)] < position[&(batch, dst)],
                    "batch {batch}: {src:?} must precede {dst:?}"
                );
            }
            if batch > 0 {
                assert!(
                    position[&(batch - 1, OpKind::Train)] < position[&(batch, OpKind::Train)],
                    "train chain order"
                );
            }
        }
    }

    #[test]
    fn serial_execution_is_canonical_order() {
        let plan = build_plan(2, 1).unwrap();
        let runner = LogRunner {
            log: PMutex::new(Vec::new()),
            op_cost: std::time::Duration::ZERO,
        };
        let sink = SpanSink::new();
        run_serial(&plan, &runner, 3, &sink).unwrap();
        let log = runner.log.into_inner();
        assert_eq!(log.len(), 33);
        check_dependencies(&plan, &log, 3);
        // Strictly batch-major.
        let batches: Vec<u64> = log.iter().map(|op| op.batch).collect();
        assert!(batches.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn concurrent_execution_respects_dependencies() {
        let plan = build_plan(2, 3).unwrap();
        let runner = LogRunner {
            log: PMutex::new(Vec::new()),
            op_cost: std::time::Duration::from_micros(200),
        };
        let sink = SpanSink::new();
        execute(&plan, &runner, 6, Budget::uniform(), 4, &sink).unwrap();
        let log = runner.log.into_inner();
        assert_eq!(log.len(), 66);
        check_dependencies(&plan, &log, 6);
    }

    #[test]
    fn depth_bounds_inflight_batches() {
        let plan = build_plan(1, 2).unwrap();
        let runner = LogRunner {
            log: PMutex::new(Vec::new()),
            op_cost: std::time::Duration::from_micros(100),
        };
        let sink = SpanSink::new();
        execute(&plan, &runner, 5, Budget::uniform(), 4, &sink).unwrap();
        let spans = sink.take();
        // Reconstruct per-batch activity intervals and check max overlap.
        let mut intervals: HashMap<u64, (u64, u64)> = HashMap::new();
        for s in &spans {
            let e = intervals.entry(s.batch).or_insert((u64::MAX, 0));
            e.0 = e.0.min(s.start_us);
            e.1 = e.1.max(s.end_us);
        }
        let mut events: Vec<(u64, i32)> = Vec::new();
        for (_, (start, end)) in intervals {
            events.push((start, 1));
            events.push((end, -1));
        }
        events.sort();
        let mut live = 0;
        let mut peak = 0;
        for (_, delta) in events {
            live += delta;
            peak = peak.max(live);
        }
        assert!(peak <= 2, "in-flight batches peaked at {peak}, depth 2");
    }

    #[test]
    fn budgets_bound_same_kind_overlap() {
        let plan = build_plan(1, 4).unwrap();
        let runner = LogRunner {
            log: PMutex::new(Vec::new()),
            op_cost: std::time::Duration::from_micros(300),
        };
        let sink = SpanSink::new();
        let budget = Budget::uniform().with_limit(OpKindTag::Sample, 2);
        execute(&plan, &runner, 8, budget, 6, &sink).unwrap();
        let spans = sink.take();
        for tag in OpKindTag::ALL {
            let mut events = Vec::new();
            for s in spans.iter().filter(|s| s.kind == tag) {
                events.push((s.start_us, 1i32));
                events.push((s.end_us, -1));
            }
            events.sort();
            let mut live = 0;
            let mut peak = 0;
            for (_, d) in events {
                live += d;
                peak = peak.max(live);
            }
            let limit = budget.limit(tag) as i32;
            assert!(peak <= limit, "{tag:?} overlap {peak} exceeds budget {limit}");
        }
    }

    struct FailingRunner;
    impl OpRunner for FailingRunner {
        fn run(&self, op: Operator) -> Result<()> {
            if op.batch == 1 && op.kind == OpKind::BatchGen {
                return Err(EngineError::Config("boom".into()));
            }
            Ok(())
        }
    }

    #[test]
    fn errors_propagate_and_stop_the_epoch() {
        let plan = build_plan(1, 2).unwrap();
        let sink = SpanSink::new();
        let err = execute(&plan, &FailingRunner, 4, Budget::uniform(), 3, &sink);
        assert!(err.is_err());
        let err = run_serial(&plan, &FailingRunner, 4, &sink);
        assert!(err.is_err());
    }
}
