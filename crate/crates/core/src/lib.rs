pub mod kernel;
pub mod problems;
pub mod data;
pub mod multilevel;
pub mod evaluation;
pub mod training;
pub mod theory;
