#include <cstdio>

// Placeholder until the CLI lands.
int main() {
  std::puts("ad3d: not wired up yet");
  return 1;
}
