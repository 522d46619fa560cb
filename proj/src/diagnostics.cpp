namespace polyboltz {
} // namespace polyboltz
