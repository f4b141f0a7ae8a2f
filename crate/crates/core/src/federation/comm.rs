//! Exact communication accounting in units of transmitted float entries.

use super::{lazy_sync_gate, ProtocolKind};

/// Float counts for one round, summed over participants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommEntry {
    pub round: usize,
    pub uplink_model: u64,
    pub uplink_moment: u64,
    pub uplink_gradient: u64,
    pub downlink_model: u64,
    pub downlink_moment: u64,
}

impl CommEntry {
    pub fn uplink(&self) -> u64 {
        self.uplink_model + self.uplink_moment + self.uplink_gradient
    }

    pub fn downlink(&self) -> u64 {
        self.downlink_model + self.downlink_moment
    }

    pub fn total(&self) -> u64 {
        self.uplink() + self.downlink()
    }
}

/// Closed-form traffic of one round.
///
/// Every participant uploads its model (or model delta) plus, for the
/// adaptive protocols, either its second moment or its full local gradient.
/// The server sends the global model, and the global capped moment only on
/// rounds where the lazy gate is open. `lazy_period = None` syncs every round.
pub fn comm_account(
    protocol: ProtocolKind,
    p: usize,
    participants: usize,
    round: usize,
    lazy_period: Option<usize>,
) -> CommEntry {
    let per = (p * participants) as u64;
    let sync = lazy_period.is_none_or(|z| lazy_sync_gate(round, z));
    let mut entry = CommEntry {
        round,
        uplink_model: per,
        downlink_model: per,
        ..CommEntry::default()
    };
    match protocol {
        ProtocolKind::FedSgd | ProtocolKind::AdpFed => {}
        ProtocolKind::FedAms | ProtocolKind::FedLamb => entry.uplink_moment = per,
        ProtocolKind::Mime | ProtocolKind::MimeLamb => entry.uplink_gradient = per,
    }
    if protocol.has_global_moment() && sync {
        entry.downlink_moment = per;
    }
    entry
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    pub entries: Vec<CommEntry>,
}

impl CommLedger {
    pub fn record(&mut self, entry: CommEntry) {
        self.entries.push(entry);
    }

    pub fn total(&self) -> CommEntry {
        self.entries
            .iter()
            .fold(CommEntry::default(), |acc, e| CommEntry {
                round: e.round,
                uplink_model: acc.uplink_model + e.uplink_model,
                uplink_moment: acc.uplink_moment + e.uplink_moment,
                uplink_gradient: acc.uplink_gradient + e.uplink_gradient,
                downlink_model: acc.downlink_model + e.downlink_model,
                downlink_moment: acc.downlink_moment + e.downlink_moment,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_tensors_versus_one() {
        let e = comm_account(ProtocolKind::FedLamb, 1000, 10, 1, Some(1));
        assert_eq!((e.uplink(), e.downlink()), (20_000, 20_000));
        let e = comm_account(ProtocolKind::FedSgd, 1000, 10, 1, Some(1));
        assert_eq!((e.uplink(), e.downlink()), (10_000, 10_000));
        let e = comm_account(ProtocolKind::MimeLamb, 1000, 10, 1, None);
        assert_eq!((e.uplink_gradient, e.downlink_moment), (10_000, 10_000));
        let e = comm_account(ProtocolKind::AdpFed, 1000, 10, 1, None);
        assert_eq!((e.uplink(), e.downlink()), (10_000, 10_000));
    }

    #[test]
    fn lazy_period_divides_moment_downlink() {
        let total = |z| {
            let mut ledger = CommLedger::default();
            for r in 1..=100 {
                ledger.record(comm_account(ProtocolKind::FedLamb, 1000, 10, r, Some(z)));
            }
            ledger.total()
        };
        let (t1, t5) = (total(1), total(5));
        assert_eq!(t1.downlink_moment, 5 * t5.downlink_moment);
        assert_eq!(t1.downlink_model, t5.downlink_model);
        assert_eq!(t1.uplink(), t5.uplink());
    }
}
