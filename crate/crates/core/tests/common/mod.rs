#![allow(dead_code)]

pub mod cstu_reference;
pub mod gradients;
