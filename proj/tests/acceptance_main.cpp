#include <cstdio>

int main() {
  std::puts("acceptance: not wired up yet");
  return 1;
}
