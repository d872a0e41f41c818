#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    spineseg_fuzz::architecture_parse(data);
});
