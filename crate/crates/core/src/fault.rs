//! Test-only fault switch: `HIERDL_INJECT_FAULT=<kernel name>` corrupts that
//! kernel's backward pass so verification tooling can be exercised.

pub(crate) fn active(kernel: &str) -> bool {
    std::env::var("HIERDL_INJECT_FAULT").is_ok_and(|v| v == kernel)
}
