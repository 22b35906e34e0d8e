//! Interrupt lines with remapping-style source authorization.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

pub const IRQ_VECTORS: usize = 256;

pub type IrqHandler = Arc<dyn Fn(u8) + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IrqError {
    #[error("vector {0} already has a handler")]
    VectorBusy(u8),
    #[error("vector {0} out of range")]
    BadVector(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Delivery {
    Delivered { handler: u32 },
    /// No handler, or the device may not raise this vector.
    Dropped,
}

#[derive(Default)]
struct IrqState {
    handlers: BTreeMap<u8, (u32, Option<IrqHandler>)>,
    authorized: BTreeSet<(u32, u8)>,
    deliveries: Vec<(u32, u8, u32)>,
    dropped: Vec<(u32, u8)>,
}

/// Vector table plus the device-to-vector authorization table.
#[derive(Default)]
pub struct IrqTable {
    state: Mutex<IrqState>,
}

impl std::fmt::Debug for IrqTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = self.state.lock();
        f.debug_struct("IrqTable").field("handlers", &s.handlers.len()).field("authorized", &s.authorized).finish()
    }
}

fn vector(v: usize) -> Result<u8, IrqError> {
    u8::try_from(v).map_err(|_| IrqError::BadVector(v))
}

impl IrqTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, vec: usize, handler_id: u32) -> Result<(), IrqError> {
        self.register_with(vec, handler_id, None)
    }

    pub fn register_with(&self, vec: usize, handler_id: u32, f: Option<IrqHandler>) -> Result<(), IrqError> {
        let v = vector(vec)?;
        let mut s = self.state.lock();
        if s.handlers.contains_key(&v) {
            return Err(IrqError::VectorBusy(v));
        }
        s.handlers.insert(v, (handler_id, f));
        Ok(())
    }

    pub fn unregister(&self, vec: usize) -> Result<(), IrqError> {
        let v = vector(vec)?;
        self.state.lock().handlers.remove(&v);
        Ok(())
    }

    /// Allows `device` to raise `vec`.
    pub fn authorize(&self, device: u32, vec: usize) -> Result<(), IrqError> {
        let v = vector(vec)?;
        self.state.lock().authorized.insert((device, v));
        Ok(())
    }

    pub fn is_authorized(&self, device: u32, vec: u8) -> bool {
        self.state.lock().authorized.contains(&(device, vec))
    }

    pub fn device_raise(&self, device: u32, vec: usize) -> Delivery {
        let Ok(v) = vector(vec) else {
            log::warn!("irq: device {device} raised out-of-range vector {vec}");
            return Delivery::Dropped;
        };
        let mut s = self.state.lock();
        let target = s
            .handlers
            .get(&v)
            .filter(|_| s.authorized.contains(&(device, v)))
            .map(|(id, f)| (*id, f.clone()));
        match target {
            Some((id, f)) => {
                s.deliveries.push((device, v, id));
                drop(s);
                if let Some(f) = f {
                    f(v);
                }
                Delivery::Delivered { handler: id }
            }
            None => {
                log::warn!("irq: dropped vector {v} from device {device}");
                s.dropped.push((device, v));
                Delivery::Dropped
            }
        }
    }

    /// (device, vector, handler) per delivered interrupt.
    pub fn deliveries(&self) -> Vec<(u32, u8, u32)> {
        self.state.lock().deliveries.clone()
    }

    pub fn dropped(&self) -> Vec<(u32, u8)> {
        self.state.lock().dropped.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delivery_follows_the_tables() {
        let t = IrqTable::new();
        t.register(32, 7).unwrap();
        assert_eq!(t.register(32, 8), Err(IrqError::VectorBusy(32)));
        t.authorize(1, 32).unwrap();
        assert_eq!(t.device_raise(1, 32), Delivery::Delivered { handler: 7 });
        assert_eq!(t.device_raise(2, 32), Delivery::Dropped);
        assert_eq!(t.device_raise(1, 33), Delivery::Dropped);
        assert_eq!(t.device_raise(1, 999), Delivery::Dropped);
        assert_eq!(t.deliveries(), vec![(1, 32, 7)]);
        assert_eq!(t.register(300, 1), Err(IrqError::BadVector(300)));
    }
}
