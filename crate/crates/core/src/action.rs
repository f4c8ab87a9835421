//! Joint device-selection / quantization-precision action.

use serde::{Deserialize, Serialize};

/// One round's action: which devices upload, and the shared bitwidth used
/// for quantization this round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    /// Selection bit per device (`true` = device uploads this round).
    pub selected: Vec<bool>,
    /// Quantization bitwidth shared by all devices this round.
    pub alpha: u32,
}

impl Action {
    pub fn new(selected: Vec<bool>, alpha: u32) -> Self {
        Self { selected, alpha }
    }

    pub fn device_count(&self) -> usize {
        self.selected.len()
    }

    pub fn num_selected(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }
}
