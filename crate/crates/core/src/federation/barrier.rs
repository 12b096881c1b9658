use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// Collects one value per expected client for a single round.
#[derive(Debug, Clone)]
pub struct RoundBarrier<T> {
    round: u32,
    expected: BTreeSet<u32>,
    received: BTreeMap<u32, T>,
}

impl<T> RoundBarrier<T> {
    pub fn new(round: u32, expected: impl IntoIterator<Item = u32>) -> Self {
        Self {
            round,
            expected: expected.into_iter().collect(),
            received: BTreeMap::new(),
        }
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    /// Records a value. Wrong round, unknown client and duplicate
    /// `(client, round)` are protocol errors and leave the barrier unchanged.
    pub fn offer(&mut self, client_id: u32, round: u32, value: T) -> Result<()> {
        if round != self.round {
            return Err(Error::Protocol(format!(
                "client {client_id} sent round {round} while collecting round {}",
                self.round
            )));
        }
        if !self.expected.contains(&client_id) {
            return Err(Error::Protocol(format!(
                "unexpected client {client_id} in round {round}"
            )));
        }
        if self.received.contains_key(&client_id) {
            return Err(Error::Protocol(format!(
                "duplicate update from client {client_id} in round {round}"
            )));
        }
        self.received.insert(client_id, value);
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.received.len() == self.expected.len()
    }

    pub fn missing(&self) -> Vec<u32> {
        self.expected
            .iter()
            .filter(|id| !self.received.contains_key(id))
            .copied()
            .collect()
    }

    /// Values in ascending client-id order. Fails unless complete.
    pub fn into_values(self) -> Result<Vec<T>> {
        if !self.is_complete() {
            return Err(Error::Protocol(format!(
                "round {} incomplete, missing {:?}",
                self.round,
                self.missing()
            )));
        }
        Ok(self.received.into_values().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn completes_in_id_order_and_rejects_duplicates() {
        let mut b = RoundBarrier::new(3, [2, 0, 1]);
        b.offer(1, 3, "b").unwrap();
        assert!(b.offer(1, 3, "again").is_err());
        assert!(b.offer(0, 2, "stale").is_err());
        assert!(b.offer(9, 3, "stranger").is_err());
        assert_eq!(b.missing(), vec![0, 2]);
        b.offer(2, 3, "c").unwrap();
        b.offer(0, 3, "a").unwrap();
        assert!(b.is_complete());
        assert_eq!(b.into_values().unwrap(), vec!["a", "b", "c"]);
    }

    #[test]
    fn incomplete_barrier_cannot_release() {
        let mut b = RoundBarrier::new(1, [0, 1]);
        b.offer(0, 1, ()).unwrap();
        assert!(b.into_values().is_err());
    }
}
