//! Training-loss composition for the voxel generation stage.

use crate::tensor::{NodeId, Tape};

/// Total voxel loss: BCE of the final prediction group plus half the mean
/// of the intermediate groups' BCE terms.
///
/// `mid_groups` pairs each intermediate logit node with its binary labels;
/// an empty slice reduces the total to the final BCE alone. Empty logit
/// groups are a caller bug and panic inside the BCE op.
pub fn voxel_loss(
    tape: &mut Tape,
    final_logits: NodeId,
    final_labels: &[f64],
    mid_groups: &[(NodeId, Vec<f64>)],
) -> NodeId {
    let mut total = tape.bce_with_logits(final_logits, final_labels);
    if mid_groups.is_empty() {
        return total;
    }
    let weight = 0.5 / mid_groups.len() as f64;
    for (logits, labels) in mid_groups {
        let term = tape.bce_with_logits(*logits, labels);
        let scaled = tape.scale(term, weight);
        total = tape.add(total, scaled);
    }
    total
}
