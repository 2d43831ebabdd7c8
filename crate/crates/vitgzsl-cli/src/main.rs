fn main() {
    // Placeholder while the library comes up; subcommands land with it.
}
