//! Insert progress markers into a reasoning trace, then drop earlier markers
//! the way a training run would at a few points of the masking schedule.

use cot_progress::annotate::{
    insert_annotations, loss_weights, mask_annotations, segment, tokenize_annotated, MaskPolicy, MaskingSchedule,
    DEFAULT_GAMMA, DEFAULT_RHO_MAX,
};

const TRACE: &str = "Let x be the number of apples. Then 3x + 2 = 11.\n\n\
Subtract 2 from both sides: 3x = 9.\n\n\
Divide by 3, so x = 3.\n\n\
Check: 3 * 3 + 2 = 11. Correct.";

fn main() -> cot_progress::Result<()> {
    let annotated = insert_annotations(&segment(TRACE)?);
    println!("{}\n", annotated.text);
    for a in &annotated.annotations {
        println!("marker at token {:>2}: {:>3}%", a.position_k, a.value);
    }

    let tokens = tokenize_annotated(&annotated.text)?;
    let weights = loss_weights(&tokens, DEFAULT_GAMMA)?;
    let upweighted = weights.iter().filter(|&&w| w > 1.0).count();
    println!("\n{} tokens, {upweighted} inside markers with weight {DEFAULT_GAMMA}", tokens.len());

    let schedule = MaskingSchedule::new(1_000, DEFAULT_RHO_MAX)?;
    for step in [0, 250, 500, 999] {
        let rho = schedule.rho(step)?;
        let masked = mask_annotations(&annotated.text, rho, step, MaskPolicy::KeepFinal)?;
        println!(
            "step {step:>3}: rho {rho:.3}, dropped {} of {} earlier markers",
            masked.removed, masked.eligible
        );
    }
    Ok(())
}
