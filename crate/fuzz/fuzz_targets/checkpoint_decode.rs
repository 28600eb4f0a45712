#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| cogen_fuzz::checkpoint_decode(data));
