/// Per-item seed for parallel work: `base ⊕ index`. Results then depend only
/// on the item index, never on scheduling order.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    base ^ index
}
