#pragma once

#include <iosfwd>
#include <string>

#include "lgrowth/model.hpp"

namespace lgrowth {

// Shortest round-trip decimal rendering (std::to_chars), so serialized
// numbers are byte-stable and parse back to the identical double.
std::string format_double(double value);

// Strict full-consume parse; throws DataError on anything else.
double parse_double(const std::string& text);

// Dataset CSV: header `id,y1,...,yT[,aux]`, one row per subject, masked cells
// written as the missing token.  The `aux` column is present when the dataset
// carries an "aux" covariate.
void write_dataset_csv(std::ostream& out, const LongitudinalDataset& data,
                       const std::string& na_token = "NA");
void write_dataset_csv(const std::string& path, const LongitudinalDataset& data,
                       const std::string& na_token = "NA");

// Inverse of write_dataset_csv.  T is inferred from the y1..yT header run;
// missing cells get mask=false and a NaN stored value.  Malformed headers,
// cells, or ragged rows throw DataError with row/column context.
LongitudinalDataset read_dataset_csv(std::istream& in, const std::string& na_token = "NA");
LongitudinalDataset read_dataset_csv(const std::string& path, const std::string& na_token = "NA");

}  // namespace lgrowth
