//! Analytic gradients of the full training loss against central differences.

mod oracles;

use tabgen_core::corpus::Task;

#[test]
fn full_loss_gradient_matches_central_differences() {
    for task in [Task::Lineitems, Task::Dependent] {
        let (worst, checked) = oracles::max_gradient_error(task);
        assert!(checked > 1000);
        assert!(worst < 1e-4, "{task:?}: {worst}");
    }
}
