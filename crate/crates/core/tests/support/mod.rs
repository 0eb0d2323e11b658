#![allow(dead_code)]

pub mod ap;
pub mod attention;
pub mod grad;
