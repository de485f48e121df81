//! Allocation instrumentation: records the shape of every tensor constructed
//! on the current thread while a capture is active.

use std::cell::RefCell;

thread_local! {
    static ACTIVE: RefCell<Option<Vec<Vec<usize>>>> = const { RefCell::new(None) };
}

pub(crate) fn note(shape: &[usize]) {
    ACTIVE.with(|a| {
        if let Some(log) = a.borrow_mut().as_mut() {
            log.push(shape.to_vec());
        }
    });
}

/// Runs `f` and returns its result together with the shapes of all tensors
/// allocated while it ran. Captures do not nest; an inner capture steals the
/// log of the outer one for its duration.
pub fn capture<R>(f: impl FnOnce() -> R) -> (R, Vec<Vec<usize>>) {
    let previous = ACTIVE.with(|a| a.borrow_mut().replace(Vec::new()));
    let out = f();
    let log = ACTIVE.with(|a| std::mem::replace(&mut *a.borrow_mut(), previous));
    (out, log.unwrap_or_default())
}
