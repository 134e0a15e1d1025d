pub fn placeholder() -> u32 { 7 }
