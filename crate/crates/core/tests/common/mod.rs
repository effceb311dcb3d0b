#![allow(dead_code)]

pub mod gradcheck;
pub mod reference;
pub mod fuzz;
pub mod preserve;
