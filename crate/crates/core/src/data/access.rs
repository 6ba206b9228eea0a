//! Records which rows are read, and in which phase, so tests can prove that
//! held-out rows never influence pre-training or fitted statistics.

use std::collections::BTreeSet;
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Setup,
    FitStats,
    Pretrain,
    Finetune,
    Evaluate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Field {
    Features,
    Image,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Access {
    pub phase: Phase,
    pub field: Field,
    pub row: usize,
}

#[derive(Debug)]
struct State {
    phase: Phase,
    reads: BTreeSet<Access>,
}

#[derive(Debug)]
pub struct AccessLog {
    state: Mutex<State>,
}

impl Default for AccessLog {
    fn default() -> Self {
        AccessLog {
            state: Mutex::new(State {
                phase: Phase::Setup,
                reads: BTreeSet::new(),
            }),
        }
    }
}

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_phase(&self, phase: Phase) {
        self.state.lock().expect("access log poisoned").phase = phase;
    }

    pub fn phase(&self) -> Phase {
        self.state.lock().expect("access log poisoned").phase
    }

    pub fn record(&self, field: Field, row: usize) {
        let mut s = self.state.lock().expect("access log poisoned");
        let phase = s.phase;
        s.reads.insert(Access { phase, field, row });
    }

    pub fn reads(&self) -> Vec<Access> {
        self.state
            .lock()
            .expect("access log poisoned")
            .reads
            .iter()
            .copied()
            .collect()
    }

    /// Reads made during `phase` of rows outside `allowed`.
    pub fn violations(&self, phase: Phase, allowed: &[usize]) -> Vec<Access> {
        let allowed: BTreeSet<usize> = allowed.iter().copied().collect();
        self.reads()
            .into_iter()
            .filter(|a| a.phase == phase && !allowed.contains(&a.row))
            .collect()
    }
}
