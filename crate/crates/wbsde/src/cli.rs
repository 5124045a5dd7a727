//! Command-line front end (placeholder while the library grows).

/// CLI entry point; returns the process exit code.
pub fn main() -> i32 {
    eprintln!("not yet wired");
    2
}
