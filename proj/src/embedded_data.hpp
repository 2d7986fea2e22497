#pragma once

// Data files compiled into the library at configure time.

namespace csd::data {

extern const char* const kSyscallsCsv;
extern const char* const kWorkloadsCsv;
extern const char* const kCostDefaultsJson;
extern const char* const kLlmArchitecturesJson;
extern const char* const kLlmCostsJson;
extern const char* const kScenarioDefaultsJson;

}  // namespace csd::data
