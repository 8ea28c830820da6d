pub mod oracles;
pub mod reference_table;
