pub mod cli;
pub mod data;
pub mod output;
pub mod study;
