fn main() {
    // CLI wiring lands after the library stabilizes.
}
