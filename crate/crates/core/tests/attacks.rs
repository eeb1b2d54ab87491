mod common;

use common::attacks;

#[test]
fn return_address_corruption_is_neutralized() {
    attacks::return_address_corruption().unwrap();
}

#[test]
fn shadow_stack_tamper_faults() {
    attacks::shadow_stack_tamper().unwrap();
}

#[test]
fn function_pointer_redirect_never_reaches_kernel() {
    attacks::function_pointer_redirect().unwrap();
}

#[test]
fn eret_page_is_refused() {
    attacks::eret_page_denied().unwrap();
}

#[test]
fn longjmp_matches_slot_scan() {
    attacks::longjmp_unwinding().unwrap();
}

#[test]
fn scenarios_are_deterministic() {
    let a: Vec<_> = attacks::all().into_iter().map(|(_, r)| r).collect();
    let b: Vec<_> = attacks::all().into_iter().map(|(_, r)| r).collect();
    assert_eq!(a, b);
}
