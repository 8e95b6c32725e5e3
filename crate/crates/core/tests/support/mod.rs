#![allow(dead_code)]

pub mod cod_oracle;
pub mod grad_suite;
pub mod pca_oracle;
pub mod stopgrad;
