// each test target uses a different subset
#![allow(dead_code)]

pub mod gradient_suite;
