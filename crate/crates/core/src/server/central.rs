use std::sync::Arc;

use super::{AddError, EpochIncError};
use crate::types::{Element, ElementSet, EpochNumber, GetResult, History, Keyring};

/// Single-process Setchain: adds are immediate and `epoch_inc` stamps every
/// unstamped element at once.
#[derive(Clone, Debug)]
pub struct Central {
    keyring: Arc<Keyring>,
    theset: ElementSet,
    history: History,
}

impl Central {
    pub fn new(keyring: Arc<Keyring>) -> Central {
        Central { keyring, theset: ElementSet::new(), history: History::new() }
    }

    pub fn epoch(&self) -> EpochNumber {
        self.history.last_epoch()
    }

    pub fn get(&self) -> GetResult {
        GetResult { theset: self.theset.clone(), history: self.history.clone(), epoch: self.epoch() }
    }

    pub fn add(&mut self, e: Element) -> Result<(), AddError> {
        if !e.is_valid(&self.keyring) {
            return Err(AddError::InvalidElement);
        }
        if !self.theset.insert(e) {
            return Err(AddError::AlreadyPresent);
        }
        Ok(())
    }

    pub fn epoch_inc(&mut self, h: EpochNumber) -> Result<(), EpochIncError> {
        if h != self.epoch().next() {
            return Err(EpochIncError { requested: h, current: self.epoch() });
        }
        let stamped: ElementSet = self.history.elements().cloned().collect();
        let fresh = self.theset.difference(&stamped).cloned().collect();
        self.history.push(fresh);
        Ok(())
    }
}
