//! Simulated device ring.
//!
//! Each device runs a worker program on its own thread and talks to its peers
//! only through unbounded FIFO mailboxes, one per ordered (sender, receiver)
//! pair. Two executors are provided:
//!
//! * [`Executor::Sequential`] passes a single baton round-robin: exactly one
//!   worker runs at a time and it yields only when it blocks on an empty
//!   mailbox or finishes. Scheduling is fully deterministic.
//! * [`Executor::Concurrent`] lets all workers run freely.
//!
//! Worker programs are deterministic functions of the messages they receive
//! and mailboxes are FIFO, so both executors produce identical results. If no
//! worker can make progress the run fails with [`Error::Deadlock`].
//!
//! The [`CommLedger`] charges nominal volumes per primitive: a ring hop costs
//! the element count of the tensor sent, and an all-reduce of `E` elements
//! costs `2·E·(N−1)/N` per device, the ring all-reduce volume. Charges are
//! exact rationals.

use std::collections::VecDeque;
use std::panic::{self, AssertUnwindSafe};
use std::str::FromStr;
use std::sync::{Condvar, Mutex, MutexGuard};

use num_traits::Zero;
use serde_json::{json, Value};

use crate::cost::{rational_to_json, Rational};
use crate::error::{DeadlockReport, Error, Result, WaitState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RingTopology {
    n_devices: usize,
}

impl RingTopology {
    pub fn new(n_devices: usize) -> Result<Self> {
        if n_devices == 0 {
            return Err(Error::Config("a ring needs at least one device".into()));
        }
        Ok(Self { n_devices })
    }

    pub fn size(&self) -> usize {
        self.n_devices
    }

    pub fn next(&self, i: usize) -> usize {
        (i + 1) % self.n_devices
    }

    pub fn prev(&self, i: usize) -> usize {
        (i + self.n_devices - 1) % self.n_devices
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Executor {
    #[default]
    Sequential,
    Concurrent,
}

impl FromStr for Executor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Executor::Sequential),
            "concurrent" => Ok(Executor::Concurrent),
            other => Err(Error::Config(format!(
                "unknown executor {other:?} (expected sequential or concurrent)"
            ))),
        }
    }
}

/// Elements sent by one device, by primitive.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DeviceLedger {
    pub ring_p2p: Rational,
    pub allreduce: Rational,
}

impl DeviceLedger {
    pub fn total(&self) -> Rational {
        self.ring_p2p + self.allreduce
    }
}

/// Per-device communication counters, in tensor elements.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommLedger {
    devices: Vec<DeviceLedger>,
    element_bytes: usize,
}

impl CommLedger {
    pub fn new(n_devices: usize, element_bytes: usize) -> Self {
        Self {
            devices: vec![DeviceLedger::default(); n_devices],
            element_bytes,
        }
    }

    pub fn devices(&self) -> &[DeviceLedger] {
        &self.devices
    }

    pub fn device(&self, i: usize) -> &DeviceLedger {
        &self.devices[i]
    }

    pub fn ring_p2p(&self, i: usize) -> Rational {
        self.devices[i].ring_p2p
    }

    pub fn allreduce(&self, i: usize) -> Rational {
        self.devices[i].allreduce
    }

    pub fn total(&self, i: usize) -> Rational {
        self.devices[i].total()
    }

    pub fn total_bytes(&self, i: usize) -> Rational {
        self.total(i) * Rational::from_integer(self.element_bytes as i128)
    }

    pub fn is_zero(&self) -> bool {
        self.devices.iter().all(|d| d.total().is_zero())
    }

    /// `Some(v)` when every device sent exactly `v` elements in total.
    pub fn uniform_total(&self) -> Option<Rational> {
        let first = self.devices.first()?.total();
        self.devices
            .iter()
            .all(|d| d.total() == first)
            .then_some(first)
    }

    /// Adds another ledger of the same ring into this one.
    pub fn absorb(&mut self, other: &CommLedger) {
        assert_eq!(
            self.devices.len(),
            other.devices.len(),
            "ledger ring sizes differ"
        );
        for (a, b) in self.devices.iter_mut().zip(&other.devices) {
            a.ring_p2p += b.ring_p2p;
            a.allreduce += b.allreduce;
        }
    }

    /// `[{device_id, ring_p2p_elements, allreduce_elements, total_bytes}, ...]`
    pub fn to_json(&self) -> Value {
        Value::Array(
            (0..self.devices.len())
                .map(|i| {
                    json!({
                        "device_id": i,
                        "ring_p2p_elements": rational_to_json(&self.ring_p2p(i)),
                        "allreduce_elements": rational_to_json(&self.allreduce(i)),
                        "total_bytes": rational_to_json(&self.total_bytes(i)),
                    })
                })
                .collect(),
        )
    }
}

/// One device's contiguous slice of the token axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ShardedSequence<T> {
    pub device_index: usize,
    pub chunk: Tensor<T>,
}

/// Splits `[B, L, ...]` along the token axis into `n` contiguous chunks;
/// device `i` receives tokens `[i·L/n, (i+1)·L/n)`.
pub fn scatter_sequence<T: Scalar>(x: &Tensor<T>, n: usize) -> Result<Vec<ShardedSequence<T>>> {
    scatter_axis(x, 1, n)
}

/// Like [`scatter_sequence`] but along an arbitrary axis (the token axis of a
/// `[B, Z, L, A]` tensor is 2).
pub fn scatter_axis<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    n: usize,
) -> Result<Vec<ShardedSequence<T>>> {
    if n == 0 || x.rank() <= axis {
        return Err(Error::Config(format!(
            "cannot scatter axis {axis} of {:?} over {n} devices",
            x.shape()
        )));
    }
    if !x.dim(axis).is_multiple_of(n) {
        return Err(Error::SequenceDivisibility {
            seq_len: x.dim(axis),
            devices: n,
        });
    }
    Ok(x.chunk(axis, n)?
        .into_iter()
        .enumerate()
        .map(|(device_index, chunk)| ShardedSequence {
            device_index,
            chunk,
        })
        .collect())
}

/// Inverse of [`scatter_sequence`].
pub fn gather_sequence<T: Scalar>(shards: &[ShardedSequence<T>]) -> Result<Tensor<T>> {
    gather_axis(shards, 1)
}

pub fn gather_axis<T: Scalar>(shards: &[ShardedSequence<T>], axis: usize) -> Result<Tensor<T>> {
    if shards.iter().enumerate().any(|(i, s)| s.device_index != i) {
        return Err(Error::Shape(
            "shards must be ordered by device index".into(),
        ));
    }
    let parts: Vec<Tensor<T>> = shards.iter().map(|s| s.chunk.clone()).collect();
    Tensor::concat(&parts, axis)
}

pub fn gather_tensors<T: Scalar>(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    Tensor::concat(parts, axis)
}

enum Message<T> {
    Tensor(Tensor<T>),
    /// One slice of a flattened all-reduce buffer plus the shape of the whole.
    Piece {
        full_shape: Vec<usize>,
        data: Vec<T>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Ready,
    Waiting(usize),
    Done,
}

struct FabricState<T> {
    mailboxes: Vec<VecDeque<Message<T>>>,
    status: Vec<Status>,
    turn: usize,
    ledger: Vec<DeviceLedger>,
    deadlock: Option<DeadlockReport>,
}

impl<T> FabricState<T> {
    fn mailbox(&mut self, n: usize, src: usize, dst: usize) -> &mut VecDeque<Message<T>> {
        &mut self.mailboxes[src * n + dst]
    }

    fn runnable(&self, n: usize, i: usize) -> bool {
        match self.status[i] {
            Status::Ready => true,
            Status::Waiting(src) => !self.mailboxes[src * n + i].is_empty(),
            Status::Done => false,
        }
    }

    fn all_stuck(&self, n: usize) -> bool {
        (0..n).all(|i| !self.runnable(n, i)) && self.status.iter().any(|s| *s != Status::Done)
    }

    fn record_deadlock(&mut self) {
        let waits = self
            .status
            .iter()
            .enumerate()
            .map(|(device, s)| WaitState {
                device,
                waiting_on: match s {
                    Status::Waiting(src) => Some(*src),
                    _ => None,
                },
            })
            .collect();
        self.deadlock = Some(DeadlockReport(waits));
    }
}

struct Fabric<T> {
    n: usize,
    executor: Executor,
    state: Mutex<FabricState<T>>,
    cv: Condvar,
}

impl<T> Fabric<T> {
    fn new(n: usize, executor: Executor) -> Self {
        Self {
            n,
            executor,
            state: Mutex::new(FabricState {
                mailboxes: (0..n * n).map(|_| VecDeque::new()).collect(),
                status: vec![Status::Ready; n],
                turn: 0,
                ledger: vec![DeviceLedger::default(); n],
                deadlock: None,
            }),
            cv: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, FabricState<T>> {
        // A poisoned lock only means another worker panicked; the panic is
        // re-raised by `Cluster::run`.
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Sequential mode: hand the baton to the next runnable device after `me`.
    fn pass_turn(&self, st: &mut FabricState<T>, me: usize) {
        if self.executor != Executor::Sequential {
            return;
        }
        let next = (1..=self.n)
            .map(|d| (me + d) % self.n)
            .find(|&i| st.runnable(self.n, i));
        match next {
            Some(i) => st.turn = i,
            None => {
                if st.all_stuck(self.n) && st.deadlock.is_none() {
                    st.record_deadlock();
                }
            }
        }
    }

    fn wait_for_turn(&self, me: usize) -> Result<()> {
        if self.executor != Executor::Sequential {
            return Ok(());
        }
        let mut st = self.lock();
        while st.turn != me {
            if let Some(report) = &st.deadlock {
                return Err(Error::Deadlock(report.clone()));
            }
            st = self.cv.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        Ok(())
    }

    fn send(&self, src: usize, dst: usize, msg: Message<T>) {
        let mut st = self.lock();
        st.mailbox(self.n, src, dst).push_back(msg);
        drop(st);
        self.cv.notify_all();
    }

    fn recv(&self, me: usize, src: usize) -> Result<Message<T>> {
        let mut st = self.lock();
        loop {
            let mine = self.executor != Executor::Sequential || st.turn == me;
            if mine {
                if let Some(msg) = st.mailbox(self.n, src, me).pop_front() {
                    st.status[me] = Status::Ready;
                    return Ok(msg);
                }
            }
            if let Some(report) = &st.deadlock {
                return Err(Error::Deadlock(report.clone()));
            }
            if st.status[me] != Status::Waiting(src) {
                st.status[me] = Status::Waiting(src);
                match self.executor {
                    Executor::Sequential => self.pass_turn(&mut st, me),
                    Executor::Concurrent => {
                        if st.all_stuck(self.n) {
                            st.record_deadlock();
                        }
                    }
                }
                self.cv.notify_all();
                continue;
            }
            st = self.cv.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    fn finish(&self, me: usize) {
        let mut st = self.lock();
        st.status[me] = Status::Done;
        match self.executor {
            Executor::Sequential => self.pass_turn(&mut st, me),
            Executor::Concurrent => {
                if st.all_stuck(self.n) && st.deadlock.is_none() {
                    st.record_deadlock();
                }
            }
        }
        drop(st);
        self.cv.notify_all();
    }

    fn charge(&self, me: usize, ring_p2p: Rational, allreduce: Rational) {
        let mut st = self.lock();
        st.ledger[me].ring_p2p += ring_p2p;
        st.ledger[me].allreduce += allreduce;
    }
}

/// Handle a worker program uses to communicate.
pub struct DeviceCtx<'a, T> {
    rank: usize,
    topology: RingTopology,
    fabric: &'a Fabric<T>,
}

impl<'a, T: Scalar> DeviceCtx<'a, T> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn num_devices(&self) -> usize {
        self.topology.size()
    }

    pub fn topology(&self) -> RingTopology {
        self.topology
    }

    fn protocol(&self, detail: String) -> Error {
        Error::Protocol {
            device: self.rank,
            detail,
        }
    }

    fn elements(n: usize) -> Rational {
        Rational::from_integer(n as i128)
    }

    /// Point-to-point send, charged as P2P volume.
    pub fn send_to(&self, dst: usize, t: Tensor<T>) -> Result<()> {
        if dst >= self.num_devices() || dst == self.rank {
            return Err(self.protocol(format!("invalid destination {dst}")));
        }
        self.fabric
            .charge(self.rank, Self::elements(t.len()), Rational::zero());
        self.fabric.send(self.rank, dst, Message::Tensor(t));
        Ok(())
    }

    /// Blocks until a tensor from `src` arrives.
    pub fn recv_from(&self, src: usize) -> Result<Tensor<T>> {
        if src >= self.num_devices() || src == self.rank {
            return Err(self.protocol(format!("invalid source {src}")));
        }
        match self.fabric.recv(self.rank, src)? {
            Message::Tensor(t) => Ok(t),
            Message::Piece { .. } => Err(self.protocol(format!(
                "expected a tensor from device {src}, got an all-reduce piece"
            ))),
        }
    }

    /// Sends `t` to the next device and returns the tensor received from the
    /// previous one. Every device must pass an equally shaped tensor.
    pub fn ring_pass(&self, t: Tensor<T>) -> Result<Tensor<T>> {
        if self.num_devices() == 1 {
            return Ok(t);
        }
        let shape = t.shape().to_vec();
        self.send_to(self.topology.next(self.rank), t)?;
        let got = self.recv_from(self.topology.prev(self.rank))?;
        if got.shape() != shape.as_slice() {
            return Err(self.protocol(format!(
                "ring pass shape drift: sent {shape:?}, received {:?}",
                got.shape()
            )));
        }
        Ok(got)
    }

    /// Elementwise sum over all devices, identical on every device.
    ///
    /// The flattened buffer is cut into `N` contiguous pieces. Each device
    /// collects piece `rank` from all peers, sums it in ascending device order,
    /// and broadcasts the reduced piece back. Charged at the ring all-reduce
    /// volume `2·E·(N−1)/N`.
    pub fn all_reduce(&self, t: Tensor<T>) -> Result<Tensor<T>> {
        let n = self.num_devices();
        if n == 1 {
            return Ok(t);
        }
        let shape = t.shape().to_vec();
        let e = t.len();
        self.fabric.charge(
            self.rank,
            Rational::zero(),
            Rational::new(2 * e as i128 * (n as i128 - 1), n as i128),
        );
        let bounds = |i: usize| (i * e / n, (i + 1) * e / n);
        let data = t.into_data();

        for dst in (0..n).filter(|&d| d != self.rank) {
            let (lo, hi) = bounds(dst);
            self.fabric.send(
                self.rank,
                dst,
                Message::Piece {
                    full_shape: shape.clone(),
                    data: data[lo..hi].to_vec(),
                },
            );
        }
        let (lo, hi) = bounds(self.rank);
        let mut reduced: Option<Vec<T>> = None;
        for src in 0..n {
            let piece = if src == self.rank {
                data[lo..hi].to_vec()
            } else {
                self.recv_piece(src, &shape, hi - lo)?
            };
            reduced = Some(match reduced {
                None => piece,
                Some(acc) => acc.iter().zip(&piece).map(|(&a, &b)| a + b).collect(),
            });
        }
        let reduced = reduced.expect("at least one device");

        for dst in (0..n).filter(|&d| d != self.rank) {
            self.fabric.send(
                self.rank,
                dst,
                Message::Piece {
                    full_shape: shape.clone(),
                    data: reduced.clone(),
                },
            );
        }
        let mut out = Vec::with_capacity(e);
        for src in 0..n {
            if src == self.rank {
                out.extend_from_slice(&reduced);
            } else {
                let (lo, hi) = bounds(src);
                out.extend(self.recv_piece(src, &shape, hi - lo)?);
            }
        }
        Tensor::new(shape, out)
    }

    fn recv_piece(&self, src: usize, shape: &[usize], len: usize) -> Result<Vec<T>> {
        match self.fabric.recv(self.rank, src)? {
            Message::Piece { full_shape, data } if full_shape == shape && data.len() == len => {
                Ok(data)
            }
            Message::Piece { full_shape, .. } => Err(self.protocol(format!(
                "all-reduce shape disagreement: local {shape:?}, device {src} has {full_shape:?}"
            ))),
            Message::Tensor(_) => Err(self.protocol(format!(
                "expected an all-reduce piece from device {src}, got a tensor"
            ))),
        }
    }
}

/// Per-device results of a worker program and the communication it caused.
#[derive(Debug)]
pub struct RingRun<R> {
    pub results: Vec<R>,
    pub ledger: CommLedger,
}

/// A ring of simulated devices plus the executor that drives it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cluster {
    topology: RingTopology,
    executor: Executor,
}

impl Cluster {
    pub fn new(n_devices: usize, executor: Executor) -> Result<Self> {
        Ok(Self {
            topology: RingTopology::new(n_devices)?,
            executor,
        })
    }

    pub fn sequential(n_devices: usize) -> Result<Self> {
        Self::new(n_devices, Executor::Sequential)
    }

    pub fn size(&self) -> usize {
        self.topology.size()
    }

    pub fn topology(&self) -> RingTopology {
        self.topology
    }

    pub fn executor(&self) -> Executor {
        self.executor
    }

    /// Runs `program` once per device and collects the results.
    ///
    /// If any worker fails, the error of the lowest-ranked worker that failed
    /// for a reason other than deadlock is returned; a deadlock is reported
    /// only when it is the sole failure mode.
    pub fn run<T, R, F>(&self, program: F) -> Result<RingRun<R>>
    where
        T: Scalar,
        R: Send,
        F: Fn(&DeviceCtx<'_, T>) -> Result<R> + Sync,
    {
        let n = self.size();
        let fabric = Fabric::<T>::new(n, self.executor);
        let outcomes: Vec<std::thread::Result<Result<R>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..n)
                .map(|rank| {
                    let fabric = &fabric;
                    let program = &program;
                    let topology = self.topology;
                    scope.spawn(move || {
                        let outcome = panic::catch_unwind(AssertUnwindSafe(|| {
                            fabric.wait_for_turn(rank)?;
                            program(&DeviceCtx {
                                rank,
                                topology,
                                fabric,
                            })
                        }));
                        fabric.finish(rank);
                        outcome
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(Err))
                .collect()
        });

        let mut results = Vec::with_capacity(n);
        let mut deadlock = None;
        let mut failure = None;
        for outcome in outcomes {
            match outcome {
                Err(payload) => panic::resume_unwind(payload),
                Ok(Ok(r)) => results.push(r),
                Ok(Err(e @ Error::Deadlock(_))) => {
                    deadlock.get_or_insert(e);
                }
                Ok(Err(e)) => {
                    failure.get_or_insert(e);
                }
            }
        }
        if let Some(e) = failure.or(deadlock) {
            return Err(e);
        }
        let st = fabric.lock();
        let mut ledger = CommLedger::new(n, std::mem::size_of::<T>());
        ledger.devices.clone_from(&st.ledger);
        Ok(RingRun { results, ledger })
    }
}

/// Convenience wrapper around [`Cluster::run`].
pub fn run_ring<T, R, F>(n: usize, executor: Executor, program: F) -> Result<RingRun<R>>
where
    T: Scalar,
    R: Send,
    F: Fn(&DeviceCtx<'_, T>) -> Result<R> + Sync,
{
    Cluster::new(n, executor)?.run(program)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    type T64 = Tensor<f64>;
    const EXECUTORS: [Executor; 2] = [Executor::Sequential, Executor::Concurrent];

    fn scalar(x: f64) -> T64 {
        T64::from_f64(&[1], &[x]).unwrap()
    }

    fn r(n: i128, d: i128) -> Rational {
        Rational::new(n, d)
    }

    #[test]
    fn topology_neighbours_are_inverse() {
        for n in 1..6 {
            let t = RingTopology::new(n).unwrap();
            for i in 0..n {
                assert_eq!(t.prev(t.next(i)), i);
                assert_eq!(t.next(t.prev(i)), i);
            }
        }
        assert!(RingTopology::new(0).is_err());
    }

    #[test]
    fn scatter_gather() {
        let x = T64::from_f64(&[1, 4, 1], &[0., 1., 2., 3.]).unwrap();
        let shards = scatter_sequence(&x, 2).unwrap();
        assert_eq!(shards[0].chunk.data(), &[0., 1.]);
        assert_eq!(shards[1].chunk.data(), &[2., 3.]);
        assert_eq!(shards[1].device_index, 1);
        let one = scatter_sequence(&x, 1).unwrap();
        assert_eq!(one[0].chunk, x);

        let y: T64 = Rng::new(0).tensor(&[2, 8, 3]).unwrap();
        for n in [1, 2, 4] {
            assert_eq!(
                gather_sequence(&scatter_sequence(&y, n).unwrap()).unwrap(),
                y
            );
        }
        assert_eq!(
            scatter_sequence(&y, 3).unwrap_err(),
            Error::SequenceDivisibility {
                seq_len: 8,
                devices: 3
            }
        );
    }

    #[test]
    fn ring_pass_rotates_by_one() {
        for exec in EXECUTORS {
            let run = run_ring(3, exec, |ctx| {
                ctx.ring_pass(scalar([1.0, 2.0, 3.0][ctx.rank()]))
            })
            .unwrap();
            let got: Vec<f64> = run.results.iter().map(|t| t.data()[0]).collect();
            assert_eq!(got, vec![3.0, 1.0, 2.0]);
            for i in 0..3 {
                assert_eq!(run.ledger.ring_p2p(i), r(1, 1));
                assert_eq!(run.ledger.allreduce(i), r(0, 1));
            }
        }
    }

    #[test]
    fn ring_pass_single_device_is_free() {
        let run = run_ring(1, Executor::Sequential, |ctx| ctx.ring_pass(scalar(5.0))).unwrap();
        assert_eq!(run.results[0].data(), &[5.0]);
        assert!(run.ledger.is_zero());
    }

    #[test]
    fn n_ring_passes_are_identity() {
        for n in [1, 2, 3, 5] {
            let run = run_ring(n, Executor::Concurrent, |ctx| {
                let mut t: T64 = Rng::new(ctx.rank() as u64).tensor(&[2, 3])?;
                let orig = t.clone();
                for _ in 0..n {
                    t = ctx.ring_pass(t)?;
                }
                Ok(t == orig)
            })
            .unwrap();
            assert!(run.results.iter().all(|&same| same));
        }
    }

    #[test]
    fn ring_pass_shape_drift_is_protocol_error() {
        let err = run_ring(2, Executor::Sequential, |ctx| {
            let t = T64::zeros(&[ctx.rank() + 1])?;
            ctx.ring_pass(t)
        })
        .unwrap_err();
        assert!(matches!(err, Error::Protocol { .. }), "{err}");
    }

    #[test]
    fn all_reduce_examples() {
        for exec in EXECUTORS {
            let run = run_ring(4, exec, |ctx| ctx.all_reduce(scalar(1.0))).unwrap();
            for i in 0..4 {
                assert_eq!(run.results[i].data(), &[4.0]);
                assert_eq!(run.ledger.allreduce(i), r(3, 2));
                assert_eq!(run.ledger.total_bytes(i), r(12, 1));
            }
            let run = run_ring(2, exec, |ctx| {
                let v = if ctx.rank() == 0 {
                    [1.0, 2.0]
                } else {
                    [10.0, 20.0]
                };
                ctx.all_reduce(T64::from_f64(&[2], &v)?)
            })
            .unwrap();
            assert!(run.results.iter().all(|t| t.data() == [11.0, 22.0]));
        }
        let run = run_ring(1, Executor::Sequential, |ctx| ctx.all_reduce(scalar(7.0))).unwrap();
        assert_eq!(run.results[0].data(), &[7.0]);
        assert!(run.ledger.is_zero());
    }

    #[test]
    fn all_reduce_sums_in_ascending_device_order() {
        for n in [2, 3, 5, 8] {
            let inputs: Vec<T64> = (0..n)
                .map(|i| {
                    Rng::new(40 + i as u64)
                        .tensor(&[3, 7])
                        .unwrap()
                        .scale(10f64.powi(i as i32 - 2))
                })
                .collect();
            let serial = T64::sum_ordered(&inputs).unwrap();
            for exec in EXECUTORS {
                let run =
                    run_ring(n, exec, |ctx| ctx.all_reduce(inputs[ctx.rank()].clone())).unwrap();
                for out in &run.results {
                    assert_eq!(out, &serial);
                }
                let expect = r(2 * 21 * (n as i128 - 1), n as i128);
                assert!((0..n).all(|i| run.ledger.allreduce(i) == expect));
            }
        }
    }

    #[test]
    fn all_reduce_shape_disagreement() {
        let err = run_ring(2, Executor::Sequential, |ctx| {
            let shape = if ctx.rank() == 0 { [2, 3] } else { [3, 2] };
            ctx.all_reduce(T64::zeros(&shape)?)
        })
        .unwrap_err();
        assert!(matches!(err, Error::Protocol { .. }), "{err}");
    }

    #[test]
    fn silent_program_has_empty_ledger() {
        let run = run_ring(4, Executor::Sequential, |ctx: &DeviceCtx<f64>| {
            Ok(ctx.rank() * 2)
        })
        .unwrap();
        assert_eq!(run.results, vec![0, 2, 4, 6]);
        assert!(run.ledger.is_zero());
    }

    #[test]
    fn one_ring_pass_ledger_counts_elements() {
        // B=1, Z=1, L/N=2, A=2 on N=4.
        let run = run_ring(4, Executor::Sequential, |ctx| {
            ctx.ring_pass(T64::zeros(&[1, 1, 2, 2])?)
        })
        .unwrap();
        assert!((0..4).all(|i| run.ledger.ring_p2p(i) == r(4, 1)));
    }

    #[test]
    fn executors_agree_bitwise() {
        let program = |ctx: &DeviceCtx<'_, f64>| -> Result<T64> {
            let mut t: T64 = Rng::new(ctx.rank() as u64).tensor(&[4, 4])?;
            for _ in 0..3 {
                let got = ctx.ring_pass(t.clone())?;
                t = t.matmul(&got)?.softmax_rows()?;
                t = ctx.all_reduce(t)?;
            }
            Ok(t)
        };
        let a = run_ring(5, Executor::Sequential, program).unwrap();
        let b = run_ring(5, Executor::Concurrent, program).unwrap();
        assert_eq!(a.results, b.results);
        assert_eq!(a.ledger, b.ledger);
    }

    #[test]
    fn deadlock_is_reported_with_wait_state() {
        for exec in EXECUTORS {
            let err = run_ring(3, exec, |ctx| match ctx.rank() {
                0 => ctx.recv_from(1).map(|_: T64| ()),
                1 => ctx.recv_from(2).map(|_: T64| ()),
                _ => Ok(()),
            })
            .unwrap_err();
            match err {
                Error::Deadlock(report) => {
                    assert_eq!(
                        report.0,
                        vec![
                            WaitState {
                                device: 0,
                                waiting_on: Some(1)
                            },
                            WaitState {
                                device: 1,
                                waiting_on: Some(2)
                            },
                            WaitState {
                                device: 2,
                                waiting_on: None
                            },
                        ]
                    );
                    let msg = report.to_string();
                    assert!(msg.contains("device 0 waiting on device 1"), "{msg}");
                }
                other => panic!("expected deadlock, got {other}"),
            }
        }
    }

    #[test]
    fn worker_error_wins_over_induced_deadlock() {
        let err = run_ring(2, Executor::Sequential, |ctx| {
            if ctx.rank() == 0 {
                Err(Error::State("boom".into()))
            } else {
                ctx.recv_from(0).map(|_: T64| ())
            }
        })
        .unwrap_err();
        assert_eq!(err, Error::State("boom".into()));
    }

    #[test]
    fn ledger_json_layout() {
        let run = run_ring(4, Executor::Sequential, |ctx| ctx.all_reduce(scalar(1.0))).unwrap();
        let v = run.ledger.to_json();
        assert_eq!(v[0]["device_id"], 0);
        assert_eq!(v[0]["ring_p2p_elements"], 0);
        assert_eq!(v[0]["allreduce_elements"], "3/2");
        assert_eq!(v[0]["total_bytes"], 12);
    }
}
