#include "sra/span_align.hpp"

#include <algorithm>
#include <stdexcept>

namespace sra {

namespace {

// First and last indices holding positive offsets, validated so that zeros
// (specials) only appear before the first or after the last, and the positive
// run strictly increases. Returns {1, 0} for a sequence with no tokens.
std::pair<int, int> token_range(const std::vector<int>& offsets, const char* side) {
  const int n = static_cast<int>(offsets.size());
  int first = 0;
  while (first < n && offsets[first] == 0) {
    ++first;
  }
  int last = n - 1;
  while (last >= 0 && offsets[last] == 0) {
    --last;
  }
  if (first > last) {
    return {1, 0};
  }
  for (int i = first; i <= last; ++i) {
    if (offsets[i] == 0) {
      throw std::invalid_argument(std::string(side) +
                                  " offsets: special token inside the token run");
    }
    if (offsets[i] < 0) {
      throw std::invalid_argument(std::string(side) + " offsets: negative value");
    }
    if (i > first && offsets[i] <= offsets[i - 1]) {
      throw std::invalid_argument(std::string(side) + " offsets: not strictly increasing");
    }
  }
  return {first, last};
}

void check_same_text(const std::vector<int>& offsets_t, const std::vector<int>& offsets_s,
                     std::pair<int, int> rt, std::pair<int, int> rs) {
  const bool empty_t = rt.first > rt.second;
  const bool empty_s = rs.first > rs.second;
  if (empty_t != empty_s) {
    throw std::invalid_argument("offsets describe different texts: one side is empty");
  }
  if (!empty_t && offsets_t[rt.second] != offsets_s[rs.second]) {
    throw std::invalid_argument("offsets describe different texts: final char counts differ");
  }
}

}  // namespace

std::vector<SpanPair> align_spans(const std::vector<int>& offsets_t,
                                  const std::vector<int>& offsets_s) {
  const auto rt = token_range(offsets_t, "teacher");
  const auto rs = token_range(offsets_s, "student");
  check_same_text(offsets_t, offsets_s, rt, rs);

  std::vector<SpanPair> spans;
  if (rt.first > rt.second) {
    return spans;
  }
  int i = rt.first;
  int j = rs.first;
  int span_start_t = i;
  int span_start_s = j;
  int char_start = 0;
  while (i <= rt.second && j <= rs.second) {
    if (offsets_t[i] == offsets_s[j]) {
      spans.push_back({{span_start_t, i}, {span_start_s, j}, char_start, offsets_t[i]});
      char_start = offsets_t[i];
      span_start_t = i + 1;
      span_start_s = j + 1;
      ++i;
      ++j;
    } else if (offsets_t[i] < offsets_s[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return spans;
}

std::vector<SpanPair> lcs_oracle(const std::vector<int>& offsets_t,
                                 const std::vector<int>& offsets_s) {
  const auto rt = token_range(offsets_t, "teacher");
  const auto rs = token_range(offsets_s, "student");
  check_same_text(offsets_t, offsets_s, rt, rs);
  if (rt.first > rt.second) {
    return {};
  }

  std::vector<int> a(offsets_t.begin() + rt.first, offsets_t.begin() + rt.second + 1);
  std::vector<int> b(offsets_s.begin() + rs.first, offsets_s.begin() + rs.second + 1);
  const int n = static_cast<int>(a.size());
  const int m = static_cast<int>(b.size());

  std::vector<std::vector<int>> dp(n + 1, std::vector<int>(m + 1, 0));
  for (int i = n - 1; i >= 0; --i) {
    for (int j = m - 1; j >= 0; --j) {
      if (a[i] == b[j]) {
        dp[i][j] = dp[i + 1][j + 1] + 1;
      } else {
        dp[i][j] = std::max(dp[i + 1][j], dp[i][j + 1]);
      }
    }
  }

  std::vector<SpanPair> spans;
  int i = 0, j = 0;
  int span_start_t = 0, span_start_s = 0, char_start = 0;
  while (i < n && j < m) {
    if (a[i] == b[j]) {
      spans.push_back({{rt.first + span_start_t, rt.first + i},
                       {rs.first + span_start_s, rs.first + j},
                       char_start,
                       a[i]});
      char_start = a[i];
      span_start_t = i + 1;
      span_start_s = j + 1;
      ++i;
      ++j;
    } else if (dp[i + 1][j] >= dp[i][j + 1]) {
      ++i;
    } else {
      ++j;
    }
  }
  return spans;
}

CoverageReport validate_alignment(const std::vector<SpanPair>& spans,
                                  const std::vector<int>& offsets_t,
                                  const std::vector<int>& offsets_s) {
  const auto rt = token_range(offsets_t, "teacher");
  const auto rs = token_range(offsets_s, "student");
  check_same_text(offsets_t, offsets_s, rt, rs);

  CoverageReport report;
  if (rt.first > rt.second) {
    if (!spans.empty()) {
      throw std::invalid_argument("alignment: spans present for an empty text");
    }
    report.coverage = 1.0;
    return report;
  }
  if (spans.empty()) {
    throw std::invalid_argument("alignment: no spans for a non-empty text");
  }

  const int total = offsets_t[rt.second];
  int expect_t = rt.first;
  int expect_s = rs.first;
  int expect_char = 0;
  int64_t tok_t = 0, tok_s = 0;
  for (const SpanPair& sp : spans) {
    if (sp.teacher.start != expect_t || sp.student.start != expect_s) {
      throw std::invalid_argument("alignment: spans do not tile the token sequences");
    }
    if (sp.teacher.end < sp.teacher.start || sp.teacher.end > rt.second ||
        sp.student.end < sp.student.start || sp.student.end > rs.second) {
      throw std::invalid_argument("alignment: span outside the token run");
    }
    if (sp.char_start != expect_char || sp.char_end <= sp.char_start) {
      throw std::invalid_argument("alignment: char ranges do not tile the text");
    }
    if (offsets_t[sp.teacher.end] != sp.char_end || offsets_s[sp.student.end] != sp.char_end) {
      throw std::invalid_argument("alignment: span boundary disagrees with offsets");
    }
    tok_t += sp.teacher.end - sp.teacher.start + 1;
    tok_s += sp.student.end - sp.student.start + 1;
    expect_t = sp.teacher.end + 1;
    expect_s = sp.student.end + 1;
    expect_char = sp.char_end;
  }
  if (expect_t != rt.second + 1 || expect_s != rs.second + 1 || expect_char != total) {
    throw std::invalid_argument("alignment: spans stop short of the end");
  }

  report.total_chars = total;
  report.span_count = static_cast<int>(spans.size());
  report.coverage = 1.0;
  report.mean_teacher_tokens = static_cast<double>(tok_t) / report.span_count;
  report.mean_student_tokens = static_cast<double>(tok_s) / report.span_count;
  return report;
}

}  // namespace sra
