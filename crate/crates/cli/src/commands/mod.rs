pub mod boxes;
pub mod evaluate;
pub mod explain;
pub mod predict;
pub mod report;
pub mod standardize;
pub mod synthetic;
pub mod train;

use serde::Serialize;

/// One-line JSON summary on stdout.
pub fn print_summary(value: impl Serialize) {
    println!("{}", serde_json::to_string(&value).expect("summary serializes"));
}
