//! Simulated rank group and its four collectives.
//!
//! A [`World`] runs one closure per rank. Each rank gets a [`RankComm`]
//! holding its mailbox, a sender to every peer and a collective sequence
//! counter. A collective is a rendezvous: every rank posts a message tagged
//! with the sequence number to every peer, then waits until it holds one
//! message per source for that sequence number. Results are always assembled
//! in ascending source rank, so every rank computes bit-identical reductions
//! regardless of arrival order.
//!
//! Two schedulers drive the ranks:
//!
//! * [`ExecMode::Lockstep`]: only one rank runs at a time. A rank that cannot
//!   complete a collective hands the turn to the next rank, round-robin. If
//!   every live rank is blocked without anyone making progress, the group is
//!   deadlocked and the blocked rank reports it.
//! * [`ExecMode::Threaded`]: every rank runs freely on its own thread and
//!   blocks on its mailbox. A rank waiting for a peer that has already exited
//!   reports a deadlock.
//!
//! Both produce the same numbers because no reduction depends on timing.

mod cost;

pub use cost::{
    comm_time, fit_comm_model, read_measurements, write_measurements, CollectiveFit, CommCoeffs,
    CommCostModel, FitReport, Measurement,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender, TryRecvError};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::linalg::{Flops, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollectiveKind {
    Broadcast,
    AllGather,
    AllReduce,
    ReduceScatter,
}

impl CollectiveKind {
    pub const ALL: [CollectiveKind; 4] = [
        CollectiveKind::Broadcast,
        CollectiveKind::AllGather,
        CollectiveKind::AllReduce,
        CollectiveKind::ReduceScatter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CollectiveKind::Broadcast => "broadcast",
            CollectiveKind::AllGather => "all-gather",
            CollectiveKind::AllReduce => "all-reduce",
            CollectiveKind::ReduceScatter => "reduce-scatter",
        }
    }
}

impl fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CollectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match key.as_str() {
            "broadcast" | "bcast" => Ok(CollectiveKind::Broadcast),
            "allgather" => Ok(CollectiveKind::AllGather),
            "allreduce" => Ok(CollectiveKind::AllReduce),
            "reducescatter" => Ok(CollectiveKind::ReduceScatter),
            _ => Err(Error::UnknownCollective(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// Caller-supplied label attached to the record of a collective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CommTag {
    pub direction: Direction,
    pub layer: usize,
    /// Whether the collective counts toward modeled communication time.
    pub billable: bool,
}

impl CommTag {
    pub fn forward(layer: usize) -> Self {
        Self {
            direction: Direction::Forward,
            layer,
            billable: true,
        }
    }

    pub fn backward(layer: usize) -> Self {
        Self {
            direction: Direction::Backward,
            layer,
            billable: true,
        }
    }

    pub fn unbilled(mut self) -> Self {
        self.billable = false;
        self
    }
}

/// One completed collective as seen by a rank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRecord {
    pub collective: CollectiveKind,
    /// Elements per rank (see each collective for the exact convention).
    pub message_size: usize,
    pub direction: Direction,
    pub layer: usize,
    pub billable: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    #[default]
    Lockstep,
    Threaded,
}

struct Message {
    seq: u64,
    src: usize,
    kind: CollectiveKind,
    root: usize,
    shape: (usize, usize),
    payload: Option<Arc<Matrix>>,
}

#[derive(Default)]
struct SchedState {
    turn: usize,
    finished: Vec<bool>,
    /// First fatal condition seen by any rank.
    failed: Option<(usize, String)>,
    /// Consecutive blocked hand-offs since any rank last made progress.
    stalled: usize,
}

struct Scheduler {
    mode: ExecMode,
    size: usize,
    state: Mutex<SchedState>,
    cv: Condvar,
}

const POLL: Duration = Duration::from_millis(5);

impl Scheduler {
    fn new(mode: ExecMode, size: usize) -> Self {
        Self {
            mode,
            size,
            state: Mutex::new(SchedState {
                finished: vec![false; size],
                ..SchedState::default()
            }),
            cv: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, SchedState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn peer_failed(rank: usize, st: &SchedState) -> Option<Error> {
        st.failed.as_ref().map(|(who, why)| Error::PeerFailed {
            rank: *who,
            detail: format!("{why} (observed by rank {rank})"),
        })
    }

    /// Lockstep: wait for the first turn.
    fn begin(&self, rank: usize) -> Result<()> {
        if self.mode != ExecMode::Lockstep {
            return Ok(());
        }
        let mut st = self.lock();
        while st.turn != rank && st.failed.is_none() {
            st = self.cv.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        match Self::peer_failed(rank, &st) {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn progress(&self) {
        if self.mode == ExecMode::Lockstep {
            self.lock().stalled = 0;
        }
    }

    fn pass_turn(&self, st: &mut SchedState, from: usize) {
        for step in 1..=self.size {
            let next = (from + step) % self.size;
            if !st.finished[next] {
                st.turn = next;
                return;
            }
        }
    }

    /// Lockstep: rank is blocked on collective `seq`; hand the turn over and
    /// wait for it to come back.
    fn yield_blocked(&self, rank: usize, seq: u64, missing: &[usize]) -> Result<()> {
        let mut st = self.lock();
        if let Some(e) = Self::peer_failed(rank, &st) {
            return Err(e);
        }
        st.stalled += 1;
        let live = st.finished.iter().filter(|f| !**f).count();
        if st.stalled >= live {
            let detail = format!(
                "every live rank is blocked; still waiting for ranks {missing:?}"
            );
            st.failed = Some((rank, format!("deadlock at collective #{seq}")));
            self.cv.notify_all();
            return Err(Error::Deadlock { rank, seq, detail });
        }
        self.pass_turn(&mut st, rank);
        self.cv.notify_all();
        while st.turn != rank && st.failed.is_none() {
            st = self.cv.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        match Self::peer_failed(rank, &st) {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn finish(&self, rank: usize, failure: Option<String>) {
        let mut st = self.lock();
        st.finished[rank] = true;
        st.stalled = 0;
        if let Some(why) = failure {
            if st.failed.is_none() {
                st.failed = Some((rank, why));
            }
        }
        if self.mode == ExecMode::Lockstep && st.turn == rank {
            self.pass_turn(&mut st, rank);
        }
        self.cv.notify_all();
    }
}

/// A group of `size` simulated ranks.
#[derive(Clone, Copy, Debug)]
pub struct World {
    size: usize,
    mode: ExecMode,
}

impl World {
    pub fn new(size: usize, mode: ExecMode) -> Result<Self> {
        if size == 0 {
            return Err(config_err("World::new", "world size must be at least 1"));
        }
        Ok(Self { size, mode })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    /// Runs `program` once per rank and returns the per-rank results in rank
    /// order. If any rank fails, the most specific error is returned: a
    /// rank's own failure is preferred over the secondary "peer failed"
    /// errors it causes elsewhere.
    pub fn run<T, F>(&self, program: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&mut RankComm) -> Result<T> + Sync,
    {
        let sched = Arc::new(Scheduler::new(self.mode, self.size));
        let (senders, receivers): (Vec<Sender<Message>>, Vec<Receiver<Message>>) =
            (0..self.size).map(|_| channel()).unzip();

        let results: Vec<Result<T>> = std::thread::scope(|scope| {
            let handles: Vec<_> = receivers
                .into_iter()
                .enumerate()
                .map(|(rank, inbox)| {
                    let mut comm = RankComm {
                        rank,
                        size: self.size,
                        seq: 0,
                        inbox,
                        peers: senders.clone(),
                        pending: BTreeMap::new(),
                        records: Vec::new(),
                        sched: Arc::clone(&sched),
                    };
                    let program = &program;
                    let sched = Arc::clone(&sched);
                    scope.spawn(move || {
                        let out = sched.begin(rank).and_then(|_| program(&mut comm));
                        let failure = out.as_ref().err().map(|e| e.to_string());
                        sched.finish(rank, failure);
                        out
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| match h.join() {
                    Ok(r) => r,
                    Err(panic) => std::panic::resume_unwind(panic),
                })
                .collect()
        });

        if results.iter().all(|r| r.is_ok()) {
            return Ok(results.into_iter().map(|r| r.ok().unwrap()).collect());
        }
        let mut errors: Vec<Error> = results.into_iter().filter_map(|r| r.err()).collect();
        let primary = errors
            .iter()
            .position(|e| !matches!(e, Error::PeerFailed { .. }))
            .unwrap_or(0);
        Err(errors.swap_remove(primary))
    }
}

/// One rank's handle on the group.
pub struct RankComm {
    rank: usize,
    size: usize,
    seq: u64,
    inbox: Receiver<Message>,
    peers: Vec<Sender<Message>>,
    pending: BTreeMap<(u64, usize), Message>,
    records: Vec<CommRecord>,
    sched: Arc<Scheduler>,
}

impl RankComm {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Number of collectives this rank has entered.
    pub fn sequence(&self) -> u64 {
        self.seq
    }

    /// Every collective completed by this rank, in order.
    pub fn records(&self) -> &[CommRecord] {
        &self.records
    }

    pub fn take_records(&mut self) -> Vec<CommRecord> {
        std::mem::take(&mut self.records)
    }

    fn drain_inbox(&mut self) {
        loop {
            match self.inbox.try_recv() {
                Ok(m) => {
                    self.pending.insert((m.seq, m.src), m);
                }
                Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => break,
            }
        }
    }

    fn missing(&self, seq: u64) -> Vec<usize> {
        (0..self.size)
            .filter(|src| !self.pending.contains_key(&(seq, *src)))
            .collect()
    }

    /// Posts this rank's part of collective `kind` and returns one message
    /// per source rank, in source order.
    fn exchange(
        &mut self,
        kind: CollectiveKind,
        root: usize,
        shape: (usize, usize),
        outgoing: impl Fn(usize) -> Option<Arc<Matrix>>,
    ) -> Result<Vec<Message>> {
        let seq = self.seq;
        self.seq += 1;
        for dest in 0..self.size {
            let msg = Message {
                seq,
                src: self.rank,
                kind,
                root,
                shape,
                payload: outgoing(dest),
            };
            if self.peers[dest].send(msg).is_err() {
                return Err(Error::Deadlock {
                    rank: self.rank,
                    seq,
                    detail: format!("rank {dest} has already exited"),
                });
            }
        }
        self.sched.progress();

        loop {
            self.drain_inbox();
            let missing = self.missing(seq);
            if missing.is_empty() {
                break;
            }
            match self.sched.mode {
                ExecMode::Lockstep => self.sched.yield_blocked(self.rank, seq, &missing)?,
                ExecMode::Threaded => match self.inbox.recv_timeout(POLL) {
                    Ok(m) => {
                        self.pending.insert((m.seq, m.src), m);
                    }
                    Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {
                        let (failed, finished) = {
                            let st = self.sched.lock();
                            (Scheduler::peer_failed(self.rank, &st), st.finished.clone())
                        };
                        // Flags were read before this drain, so anything a
                        // finished peer sent is already visible.
                        self.drain_inbox();
                        let missing = self.missing(seq);
                        if missing.is_empty() {
                            break;
                        }
                        if let Some(e) = failed {
                            return Err(e);
                        }
                        if let Some(gone) = missing.iter().find(|r| finished[**r]) {
                            return Err(Error::Deadlock {
                                rank: self.rank,
                                seq,
                                detail: format!(
                                    "rank {gone} exited without entering this {kind}"
                                ),
                            });
                        }
                    }
                },
            }
        }

        let msgs: Vec<Message> = (0..self.size)
            .map(|src| self.pending.remove(&(seq, src)).expect("present"))
            .collect();
        for m in &msgs {
            if m.kind != kind {
                return Err(self.protocol(
                    seq,
                    format!("rank {} entered {} while rank {} entered {kind}", m.src, m.kind, self.rank),
                ));
            }
            if m.root != root {
                return Err(self.protocol(
                    seq,
                    format!("rank {} used root {} but rank {} used root {root}", m.src, m.root, self.rank),
                ));
            }
            if m.shape != shape {
                return Err(self.protocol(
                    seq,
                    format!(
                        "{kind}: rank {} passed {:?} but rank {} passed {:?}",
                        m.src, m.shape, self.rank, shape
                    ),
                ));
            }
        }
        Ok(msgs)
    }

    fn protocol(&self, seq: u64, detail: String) -> Error {
        Error::Protocol {
            rank: self.rank,
            seq,
            detail,
        }
    }

    fn record(&mut self, collective: CollectiveKind, message_size: usize, tag: CommTag) {
        self.records.push(CommRecord {
            collective,
            message_size,
            direction: tag.direction,
            layer: tag.layer,
            billable: tag.billable,
        });
    }

    /// Every rank receives the row-wise concatenation of all ranks' `local`,
    /// in rank order. Recorded size: elements of `local`.
    pub fn all_gather(&mut self, local: &Matrix, tag: CommTag) -> Result<Matrix> {
        let payload = Arc::new(local.clone());
        let msgs = self.exchange(CollectiveKind::AllGather, 0, local.shape(), |_| {
            Some(Arc::clone(&payload))
        })?;
        let parts: Vec<Matrix> = msgs
            .into_iter()
            .map(|m| Arc::unwrap_or_clone(m.payload.expect("all-gather payload")))
            .collect();
        let out = Matrix::vstack(&parts)?;
        self.record(CollectiveKind::AllGather, local.len(), tag);
        Ok(out)
    }

    /// `contributions` is split into `size` equal row chunks; rank `j`
    /// receives the sum over ranks (ascending) of chunk `j`. Recorded size:
    /// elements of one chunk.
    pub fn reduce_scatter(&mut self, contributions: &Matrix, tag: CommTag) -> Result<Matrix> {
        let p = self.size;
        let divisible = contributions.rows() % p == 0;
        let chunk_rows = contributions.rows() / p;
        let chunks: Vec<Arc<Matrix>> = if divisible {
            (0..p)
                .map(|i| Arc::new(contributions.row_block(i * chunk_rows, chunk_rows)))
                .collect()
        } else {
            Vec::new()
        };
        let msgs = self.exchange(
            CollectiveKind::ReduceScatter,
            0,
            contributions.shape(),
            |dest| chunks.get(dest).cloned(),
        )?;
        if !divisible {
            return Err(self.protocol(
                self.seq - 1,
                format!(
                    "reduce-scatter of {} rows cannot be split into {p} chunks",
                    contributions.rows()
                ),
            ));
        }
        let mut flops = Flops::default();
        let mut acc: Option<Matrix> = None;
        for m in msgs {
            let chunk = m.payload.expect("reduce-scatter payload");
            match acc.as_mut() {
                None => acc = Some(Arc::unwrap_or_clone(chunk)),
                Some(a) => a.add_assign(&chunk, &mut flops)?,
            }
        }
        let out = acc.expect("at least one rank");
        self.record(CollectiveKind::ReduceScatter, out.len(), tag);
        Ok(out)
    }

    /// Every rank receives `root`'s payload. All ranks pass a buffer of the
    /// same shape; only the root's contents matter. Recorded size: elements
    /// of the payload.
    pub fn broadcast(&mut self, root: usize, payload: &Matrix, tag: CommTag) -> Result<Matrix> {
        if root >= self.size {
            return Err(config_err(
                "broadcast",
                format!("root {root} outside world of size {}", self.size),
            ));
        }
        let mine = (self.rank == root).then(|| Arc::new(payload.clone()));
        let msgs = self.exchange(CollectiveKind::Broadcast, root, payload.shape(), |_| {
            mine.clone()
        })?;
        let out = msgs
            .into_iter()
            .find(|m| m.src == root)
            .and_then(|m| m.payload)
            .expect("root payload");
        self.record(CollectiveKind::Broadcast, payload.len(), tag);
        Ok(Arc::unwrap_or_clone(out))
    }

    /// Every rank receives the sum (ascending rank order) of all `local`s.
    /// Recorded size: elements of `local`.
    pub fn all_reduce(&mut self, local: &Matrix, tag: CommTag) -> Result<Matrix> {
        let payload = Arc::new(local.clone());
        let msgs = self.exchange(CollectiveKind::AllReduce, 0, local.shape(), |_| {
            Some(Arc::clone(&payload))
        })?;
        let mut flops = Flops::default();
        let mut acc: Option<Matrix> = None;
        for m in msgs {
            let part = m.payload.expect("all-reduce payload");
            match acc.as_mut() {
                None => acc = Some(Arc::unwrap_or_clone(part)),
                Some(a) => a.add_assign(&part, &mut flops)?,
            }
        }
        self.record(CollectiveKind::AllReduce, local.len(), tag);
        Ok(acc.expect("at least one rank"))
    }
}

/// The gather used to exchange phantom activations, paired with its adjoint.
///
/// Forward concatenates every rank's shard; backward chunks the incoming
/// gradient by source rank and reduce-scatters it, so each rank gets the sum
/// of the gradients every rank computed with respect to its shard.
pub struct ShardGather;

impl ShardGather {
    pub fn forward(comm: &mut RankComm, local: &Matrix, tag: CommTag) -> Result<Matrix> {
        comm.all_gather(local, tag)
    }

    pub fn backward(comm: &mut RankComm, grad_output: &Matrix, tag: CommTag) -> Result<Matrix> {
        comm.reduce_scatter(grad_output, tag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn both_modes() -> [ExecMode; 2] {
        [ExecMode::Lockstep, ExecMode::Threaded]
    }

    fn row(values: &[f64]) -> Matrix {
        Matrix::column(values)
    }

    #[test]
    fn all_gather_examples() {
        for mode in both_modes() {
            let out = World::new(2, mode)
                .unwrap()
                .run(|c| c.all_gather(&row(&[c.rank() as f64 + 1.0]), CommTag::forward(0)))
                .unwrap();
            assert!(out.iter().all(|m| *m == row(&[1.0, 2.0])));

            let out = World::new(3, mode)
                .unwrap()
                .run(|c| c.all_gather(&row(&[c.rank() as f64]), CommTag::forward(0)))
                .unwrap();
            assert!(out.iter().all(|m| *m == row(&[0.0, 1.0, 2.0])));

            let out = World::new(1, mode)
                .unwrap()
                .run(|c| c.all_gather(&row(&[4.0, 5.0]), CommTag::forward(0)))
                .unwrap();
            assert_eq!(out[0], row(&[4.0, 5.0]));
        }
    }

    #[test]
    fn reduce_scatter_examples() {
        for mode in both_modes() {
            let out = World::new(2, mode)
                .unwrap()
                .run(|c| {
                    let r = c.rank() as f64;
                    c.reduce_scatter(&row(&[1.0 + r, 10.0 + r]), CommTag::backward(0))
                })
                .unwrap();
            assert_eq!(out, vec![row(&[3.0]), row(&[21.0])]);

            let out = World::new(2, mode)
                .unwrap()
                .run(|c| c.reduce_scatter(&Matrix::zeros(4, 3), CommTag::backward(0)))
                .unwrap();
            assert!(out.iter().all(|m| *m == Matrix::zeros(2, 3)));

            let out = World::new(1, mode)
                .unwrap()
                .run(|c| c.reduce_scatter(&row(&[7.0, 8.0]), CommTag::backward(0)))
                .unwrap();
            assert_eq!(out[0], row(&[7.0, 8.0]));
        }
    }

    #[test]
    fn broadcast_examples() {
        for mode in both_modes() {
            let out = World::new(2, mode)
                .unwrap()
                .run(|c| {
                    let mine = if c.rank() == 0 { row(&[5.0]) } else { row(&[0.0]) };
                    c.broadcast(0, &mine, CommTag::forward(0))
                })
                .unwrap();
            assert!(out.iter().all(|m| *m == row(&[5.0])));

            let out = World::new(4, mode)
                .unwrap()
                .run(|c| {
                    let mine = if c.rank() == 3 {
                        row(&[1.0, 2.0])
                    } else {
                        Matrix::zeros(2, 1)
                    };
                    c.broadcast(3, &mine, CommTag::forward(0))
                })
                .unwrap();
            assert!(out.iter().all(|m| *m == row(&[1.0, 2.0])));

            let out = World::new(1, mode)
                .unwrap()
                .run(|c| c.broadcast(0, &row(&[9.0]), CommTag::forward(0)))
                .unwrap();
            assert_eq!(out[0], row(&[9.0]));
        }
    }

    #[test]
    fn all_reduce_examples() {
        for mode in both_modes() {
            let out = World::new(2, mode)
                .unwrap()
                .run(|c| c.all_reduce(&row(&[c.rank() as f64 + 1.0]), CommTag::backward(0)))
                .unwrap();
            assert!(out.iter().all(|m| *m == row(&[3.0])));

            let out = World::new(3, mode)
                .unwrap()
                .run(|c| c.all_reduce(&Matrix::filled(2, 1, 1.0), CommTag::backward(0)))
                .unwrap();
            assert!(out.iter().all(|m| *m == row(&[3.0, 3.0])));

            let out = World::new(1, mode)
                .unwrap()
                .run(|c| c.all_reduce(&row(&[2.5]), CommTag::backward(0)))
                .unwrap();
            assert_eq!(out[0], row(&[2.5]));
        }
    }

    #[test]
    fn records_carry_sizes_and_tags() {
        let recs = World::new(2, ExecMode::Lockstep)
            .unwrap()
            .run(|c| {
                c.all_gather(&Matrix::zeros(3, 2), CommTag::forward(1))?;
                c.reduce_scatter(&Matrix::zeros(4, 2), CommTag::backward(1))?;
                c.all_reduce(&Matrix::zeros(1, 1), CommTag::forward(0).unbilled())?;
                Ok(c.take_records())
            })
            .unwrap();
        assert_eq!(recs[0], recs[1]);
        let r = &recs[0];
        assert_eq!(r[0].collective, CollectiveKind::AllGather);
        assert_eq!(r[0].message_size, 6);
        assert_eq!(r[0].layer, 1);
        assert_eq!(r[1].collective, CollectiveKind::ReduceScatter);
        assert_eq!(r[1].message_size, 4);
        assert_eq!(r[1].direction, Direction::Backward);
        assert!(!r[2].billable);
    }

    #[test]
    fn shape_disagreement_is_a_protocol_error() {
        for mode in both_modes() {
            let err = World::new(2, mode)
                .unwrap()
                .run(|c| c.all_gather(&Matrix::zeros(c.rank() + 1, 1), CommTag::forward(0)))
                .unwrap_err();
            assert!(matches!(err, Error::Protocol { .. }), "{err}");
        }
    }

    #[test]
    fn indivisible_reduce_scatter_is_a_protocol_error() {
        let err = World::new(2, ExecMode::Lockstep)
            .unwrap()
            .run(|c| c.reduce_scatter(&Matrix::zeros(3, 1), CommTag::backward(0)))
            .unwrap_err();
        assert!(matches!(err, Error::Protocol { .. }), "{err}");
    }

    #[test]
    fn mismatched_collective_kinds_are_a_protocol_error() {
        let err = World::new(2, ExecMode::Threaded)
            .unwrap()
            .run(|c| {
                if c.rank() == 0 {
                    c.all_reduce(&Matrix::zeros(1, 1), CommTag::forward(0))
                } else {
                    c.all_gather(&Matrix::zeros(1, 1), CommTag::forward(0))
                }
            })
            .unwrap_err();
        assert!(matches!(err, Error::Protocol { .. }), "{err}");
    }

    #[test]
    fn inconsistent_root_is_a_protocol_error() {
        let err = World::new(2, ExecMode::Lockstep)
            .unwrap()
            .run(|c| {
                let root = c.rank();
                c.broadcast(root, &Matrix::zeros(1, 1), CommTag::forward(0))
            })
            .unwrap_err();
        assert!(matches!(err, Error::Protocol { .. }), "{err}");
    }

    #[test]
    fn missing_rank_is_reported_as_deadlock() {
        for mode in both_modes() {
            let err = World::new(3, mode)
                .unwrap()
                .run(|c| {
                    if c.rank() != 2 {
                        c.all_reduce(&Matrix::zeros(1, 1), CommTag::forward(0))?;
                    }
                    Ok(())
                })
                .unwrap_err();
            assert!(matches!(err, Error::Deadlock { .. }), "{mode:?}: {err}");
        }
    }

    #[test]
    fn rank_failure_unblocks_peers() {
        for mode in both_modes() {
            let err = World::new(2, mode)
                .unwrap()
                .run(|c| {
                    if c.rank() == 1 {
                        return Err(Error::Sequencing("boom".into()));
                    }
                    c.all_reduce(&Matrix::zeros(1, 1), CommTag::forward(0))?;
                    Ok(())
                })
                .unwrap_err();
            assert!(matches!(err, Error::Sequencing(_)), "{err}");
        }
    }

    #[test]
    fn many_collectives_back_to_back() {
        for mode in both_modes() {
            let out = World::new(4, mode)
                .unwrap()
                .run(|c| {
                    let mut x = Matrix::filled(4, 2, c.rank() as f64);
                    for _ in 0..50 {
                        let g = c.all_gather(&x, CommTag::forward(0))?;
                        x = c.reduce_scatter(&g, CommTag::backward(0))?;
                        x.scale(0.25);
                    }
                    Ok(x)
                })
                .unwrap();
            for (r, m) in out.iter().enumerate() {
                assert_eq!(*m, Matrix::filled(4, 2, r as f64));
            }
        }
    }

    #[test]
    fn collective_kind_parsing() {
        assert_eq!(
            "Reduce-Scatter".parse::<CollectiveKind>().unwrap(),
            CollectiveKind::ReduceScatter
        );
        assert_eq!(
            "all_gather".parse::<CollectiveKind>().unwrap(),
            CollectiveKind::AllGather
        );
        assert!("gossip".parse::<CollectiveKind>().is_err());
    }
}
