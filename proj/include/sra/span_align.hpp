#pragma once

#include <string>
#include <vector>

namespace sra {

// Inclusive range of token indices.
struct Span {
  int start;
  int end;

  bool operator==(const Span&) const = default;
};

// A teacher span and a student span that cover exactly the same characters of
// the underlying text: [char_start, char_end) in 0-based char positions.
struct SpanPair {
  Span teacher;
  Span student;
  int char_start;
  int char_end;

  bool operator==(const SpanPair&) const = default;
};

// Carves two tokenizations of the same text into the finest sequence of
// aligned segments. Inputs are per-token cumulative char counts (1-based end
// positions), with 0 marking special tokens; specials may only appear at the
// ends. The walk advances whichever side is behind and emits a span pair at
// every shared boundary. Runs in O(|T| + |S|).
//
// Both tokenizations must describe the same text: equal final offsets.
// Returns an empty list when neither side has any non-special token.
std::vector<SpanPair> align_spans(const std::vector<int>& offsets_t,
                                  const std::vector<int>& offsets_s);

// Reference implementation used to cross-check align_spans: classic O(n*m)
// longest-common-subsequence table over the two offset sequences, with spans
// reconstructed from the matched elements. Deliberately shares no code with
// align_spans.
std::vector<SpanPair> lcs_oracle(const std::vector<int>& offsets_t,
                                 const std::vector<int>& offsets_s);

struct CoverageReport {
  int total_chars = 0;
  int span_count = 0;
  double coverage = 0.0;  // covered chars / total chars (1.0 when defined)
  double mean_teacher_tokens = 0.0;
  double mean_student_tokens = 0.0;
};

// Verifies that `spans` tile both token sequences and the full char range:
// contiguous inclusive token ranges on each side, char ranges that partition
// [0, total). Throws std::invalid_argument on any violation.
CoverageReport validate_alignment(const std::vector<SpanPair>& spans,
                                  const std::vector<int>& offsets_t,
                                  const std::vector<int>& offsets_s);

}  // namespace sra
